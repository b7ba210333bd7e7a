#pragma once

#include "slotdiff/backbone.hpp"
#include "slotdiff/isa.hpp"

// Spatial broadcast decoder: each slot is tiled over the output grid,
// coordinate channels are appended, and a small shared conv stack emits
// per-slot RGB plus an alpha logit. Slot renders combine by softmax alpha
// compositing. In ISA mode the coordinate channels carry the slot's
// relative grid and a learned projection of it is added on top, so identity
// vectors stay pose-free.

namespace slotdiff {

template <typename S>
struct BroadcastDecoderParams {
  int d_slot = 64, width = 32, out_h = 32, out_w = 32;
  bool isa_mode = false;
  Conv2dM<S> c1, c2, c3, c4;
  Linear<S> grid_proj;  // ISA: 2 -> d_slot + 2, added onto the broadcast tensor

  void init(int d_slot_, int H, int W, bool isa, Rng& rng, ParamSet<S>& ps,
            const std::string& name, int width_ = 32) {
    d_slot = d_slot_;
    out_h = H;
    out_w = W;
    isa_mode = isa;
    width = width_;
    int cin = d_slot + 2;
    c1.init(cin, width, 3, 1, 1, rng, ps, name + ".c1");
    c2.init(width, width, 3, 1, 1, rng, ps, name + ".c2");
    c3.init(width, width, 3, 1, 1, rng, ps, name + ".c3");
    c4.init(width, 4, 3, 1, 1, rng, ps, name + ".c4");  // rgb + alpha logit
    // rgb bias starts mid-gray so the clamped composite has live gradients
    c4.b.value[0] = c4.b.value[1] = c4.b.value[2] = S(0.5);
    if (isa) grid_proj.init(2, cin, rng, ps, name + ".grid_proj", false);
  }
};

// Tiles one slot over H x W and appends the two coordinate channels
// (pixel centers, range [-1,1]); output layout [1, d+2, H, W].
template <typename S>
Var<S> spatial_broadcast(Tape<S>& t, Var<S> slot_row, int H, int W) {
  const Tensor<S>& sv = t.val(slot_row);
  if (sv.rank() != 2 || sv.rows() != 1) throw std::invalid_argument("spatial_broadcast: 1 x D expected");
  if (H < 1 || W < 1) throw std::invalid_argument("spatial_broadcast: empty grid");
  int D = sv.cols();
  Var<S> tiled = tile_rows(slot_row, H * W);  // (H*W) x D
  Tensor<S> coords = patch_grid<S>(H, W);
  Var<S> with_coords = concat_cols(tiled, t.input(std::move(coords)));  // (H*W) x (D+2)
  return from_tokens(with_coords, 1, D + 2, H, W);
}

template <typename S>
struct PerSlotRenderVars {
  Var<S> rgb;           // (B*K) stacked renders, [B*K, 3, H, W]
  Var<S> alpha_logits;  // [B*K, 1, H, W]
  int batch = 1, num_slots = 1;
};

namespace detail {

template <typename S>
Var<S> decoder_stack(Tape<S>& t, const BroadcastDecoderParams<S>& p, Var<S> z) {
  Var<S> h = relu(p.c1(t, z));
  h = relu(p.c2(t, h));
  h = relu(p.c3(t, h));
  return p.c4(t, h);
}

}  // namespace detail

// Decode a batch of slot sets. `slots` is [B*K, d_slot] (per-sample blocks);
// for ISA mode pos/scale are [B*K, 2]. All slots share one conv stack and
// run as a single batched convolution.
template <typename S>
PerSlotRenderVars<S> decode_slots(Tape<S>& t, const BroadcastDecoderParams<S>& p, Var<S> slots,
                                  int batch, Var<S> pos = Var<S>{}, Var<S> scale = Var<S>{}) {
  const Tensor<S>& sv = t.val(slots);
  if (sv.rank() != 2 || sv.cols() != p.d_slot) throw std::invalid_argument("decode_slots: bad slots");
  int BK = sv.rows();
  if (BK % batch != 0) throw std::invalid_argument("decode_slots: batch mismatch");
  int H = p.out_h, W = p.out_w;
  Tensor<S> coords = patch_grid<S>(H, W);
  Var<S> coords_var = t.input(coords);

  std::vector<Var<S>> maps;
  for (int r = 0; r < BK; ++r) {
    Var<S> tiled = tile_rows(row(slots, r), H * W);
    Var<S> grid_channels = coords_var;
    if (p.isa_mode) {
      if (!pos.valid() || !scale.valid()) throw std::invalid_argument("decode_slots: ISA needs pose");
      grid_channels = div_rowvec(sub_rowvec(coords_var, row(pos, r)), row(scale, r));
    }
    Var<S> z = concat_cols(tiled, grid_channels);  // (H*W) x (d+2)
    if (p.isa_mode) z = add(z, const_cast<BroadcastDecoderParams<S>&>(p).grid_proj(t, grid_channels));
    maps.push_back(z);
  }
  Var<S> stacked = concat_rows(maps);  // (BK*H*W) x (d+2)
  Var<S> z4 = from_tokens(stacked, BK, p.d_slot + 2, H, W);
  Var<S> out = detail::decoder_stack(t, p, z4);  // [BK, 4, H, W]

  PerSlotRenderVars<S> r;
  r.batch = batch;
  r.num_slots = BK / batch;
  // split channels via token view: rgb = first 3 channels, alpha = last
  Var<S> tok = to_tokens(out);            // (BK*H*W) x 4
  r.rgb = from_tokens(col_block(tok, 0, 3), BK, 3, H, W);
  r.alpha_logits = from_tokens(col_block(tok, 3, 1), BK, 1, H, W);
  return r;
}

template <typename S>
struct CompositeVars {
  Var<S> image;  // [B, 3, H, W] clamped to [0,1]
  Var<S> masks;  // [B*K, 1, H, W]? no: (K x H*W) per sample stacked -> [B*K, H*W]
};

// Softmax alpha compositing. Masks normalize across the slot axis per
// pixel; the composite is the mask-weighted sum of slot RGB, clamped.
template <typename S>
CompositeVars<S> alpha_composite(Tape<S>& t, const PerSlotRenderVars<S>& r) {
  int B = r.batch, K = r.num_slots;
  const Tensor<S>& av = t.val(r.alpha_logits);
  int H = av.shape[2], W = av.shape[3];
  int64_t hw = int64_t(H) * W;
  Var<S> alpha_rows = reshape(r.alpha_logits, {B * K, int(hw)});
  Var<S> rgb_tokens = to_tokens(r.rgb);  // (B*K*H*W) x 3
  std::vector<Var<S>> images, masks;
  for (int b = 0; b < B; ++b) {
    Var<S> logits = rows_slice(alpha_rows, b * K, K);   // K x hw
    Var<S> m = softmax(logits, 0);                      // normalize across slots
    Var<S> acc;
    for (int k = 0; k < K; ++k) {
      // rgb of slot k as 3 x hw: tokens rows are pixel-major per (b,k)
      Var<S> rgb_k = reshape(rows_slice(rgb_tokens, (b * K + k) * int(hw), int(hw)), {int(hw), 3});
      Var<S> weighted = mul_colvec(rgb_k, reshape(row(m, k), {int(hw), 1}));
      acc = k == 0 ? weighted : add(acc, weighted);
    }
    images.push_back(acc);  // hw x 3
    masks.push_back(m);
  }
  CompositeVars<S> out;
  Var<S> img_tokens = concat_rows(images);  // (B*hw) x 3
  out.image = clamp_range(from_tokens(img_tokens, B, 3, H, W), S(0), S(1));
  out.masks = concat_rows(masks);  // (B*K) x hw
  return out;
}

// Pixel MSE between the composite and the target batch.
template <typename S>
Var<S> recon_loss(Tape<S>& t, const CompositeVars<S>& c, Var<S> target_images) {
  return mse_loss(c.image, target_images);
}

}  // namespace slotdiff

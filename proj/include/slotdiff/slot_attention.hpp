#pragma once

#include "slotdiff/nn.hpp"

// Slot Attention: iterative competitive attention over backbone features.
// Slots softmax-compete per feature (normalization across the slot axis) and
// integrate their attention-weighted input through a shared GRU.

namespace slotdiff {

template <typename S>
struct SlotAttentionParams {
  int num_slots = 4, d_slot = 64, d_key = 64, iters = 3;
  bool mean_aggregation = true;   // per-slot weighted mean; `false` is Eq-literal sum
  bool use_residual_mlp = false;  // off by default; the paper does not name it
  bool plain_normal_init = false; // N(0,1) init instead of learned (mu, sigma)
  LayerNormModule<S> norm_inputs, norm_slots, norm_mlp;
  Linear<S> wq, wk, wv;
  GruCell<S> gru;
  Mlp<S> res_mlp;
  Parameter<S> mu0, log_sigma0;  // 1 x d_slot

  void init(int K, int d_feat, int d_slot_, int d_key_, int iters_, Rng& rng, ParamSet<S>& ps,
            const std::string& name) {
    num_slots = K;
    d_slot = d_slot_;
    d_key = d_key_;
    iters = iters_;
    norm_inputs.init(d_feat, ps, name + ".norm_inputs");
    norm_slots.init(d_slot, ps, name + ".norm_slots");
    norm_mlp.init(d_slot, ps, name + ".norm_mlp");
    wq.init(d_slot, d_key, rng, ps, name + ".wq", false);
    wk.init(d_feat, d_key, rng, ps, name + ".wk", false);
    wv.init(d_feat, d_slot, rng, ps, name + ".wv", false);
    gru.init(d_slot, d_slot, rng, ps, name + ".gru");
    res_mlp.init(d_slot, 2 * d_slot, d_slot, rng, ps, name + ".res_mlp");
    init_zeros(mu0, {1, d_slot});
    init_zeros(log_sigma0, {1, d_slot});
    ps.add(mu0, name + ".mu0");
    ps.add(log_sigma0, name + ".log_sigma0");
  }
};

template <typename S>
struct SlotStateVars {
  Var<S> slots;  // K x d_slot
  Var<S> attn;   // N x K, rows sum to 1 across slots
};

// One refinement iteration over features `tokens` (N x d_feat).
template <typename S>
SlotStateVars<S> slot_attention_step(Tape<S>& t, Var<S> slots, Var<S> tokens,
                                     const SlotAttentionParams<S>& p) {
  auto& m = const_cast<SlotAttentionParams<S>&>(p);
  Var<S> fn = m.norm_inputs(t, tokens);
  Var<S> k = m.wk(t, fn);  // N x d_key
  Var<S> v = m.wv(t, fn);  // N x d_slot
  Var<S> q = m.wq(t, m.norm_slots(t, slots));  // K x d_key
  Var<S> logits = matmul(k, q, false, true);   // N x K
  Var<S> scaled = scale(logits, S(1.0 / std::sqrt(double(p.d_key))));
  Var<S> attn = softmax(scaled, 1);  // compete across slots
  Var<S> update = matmul(attn, v, true, false);  // K x d_slot, weighted sum
  if (p.mean_aggregation) {
    Var<S> totals = add_const(reshape(col_sum(attn), {p.num_slots, 1}), S(1e-8));
    update = div_colvec(update, totals);
  }
  Var<S> next = gru_step(t, p.gru, slots, update);
  if (p.use_residual_mlp) next = add(next, m.res_mlp(t, m.norm_mlp(t, next)));
  return {next, attn};
}

// Draws the initial slots mu0 + sigma0 * eps with eps ~ N(0,1).
template <typename S>
Var<S> sample_initial_slots(Tape<S>& t, const SlotAttentionParams<S>& p, Rng& rng) {
  auto& m = const_cast<SlotAttentionParams<S>&>(p);
  Tensor<S> eps = Tensor<S>::randn({p.num_slots, p.d_slot}, rng);
  if (p.plain_normal_init) return t.input(std::move(eps));
  Var<S> sigma = exp_v(t.leaf(m.log_sigma0));
  return add_rowvec(mul_rowvec(t.input(std::move(eps)), sigma), t.leaf(m.mu0));
}

template <typename S>
SlotStateVars<S> slot_attention(Tape<S>& t, Var<S> tokens, const SlotAttentionParams<S>& p,
                                Rng& rng) {
  if (p.iters < 1) throw std::invalid_argument("slot_attention: iters >= 1");
  SlotStateVars<S> st;
  st.slots = sample_initial_slots(t, p, rng);
  for (int it = 0; it < p.iters; ++it) st = slot_attention_step(t, st.slots, tokens, p);
  return st;
}

// ---------------------------------------------------------------------------
// mask readout shared by both attention variants
// ---------------------------------------------------------------------------

// Per-slot attention over features (K x N), patch grid h x w, upsampled to
// H x W by nearest neighbor.
template <typename S>
Tensor<S> upsample_masks(const Tensor<S>& attn_kn, int h, int w, int H, int W) {
  int K = attn_kn.rows();
  if (attn_kn.cols() != h * w) throw std::invalid_argument("upsample_masks: grid mismatch");
  Tensor<S> out({K, H, W});
  for (int k = 0; k < K; ++k)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        int py = y * h / H, px = x * w / W;
        out.data[(size_t(k) * H + y) * W + x] = attn_kn.at(k, py * w + px);
      }
  return out;
}

// Argmax segmentation from K x H x W masks; labels in 1..K.
template <typename S>
std::vector<int> masks_argmax(const Tensor<S>& masks) {
  int K = masks.shape[0], H = masks.shape[1], W = masks.shape[2];
  std::vector<int> labels(size_t(H) * W, 1);
  for (int64_t p = 0; p < int64_t(H) * W; ++p) {
    S best = masks.data[size_t(p)];
    for (int k = 1; k < K; ++k) {
      S v = masks.data[size_t(k) * H * W + p];
      if (v > best) {
        best = v;
        labels[size_t(p)] = k + 1;
      }
    }
  }
  return labels;
}

// Encoder masks from a slot-attention state (attn is N x K).
template <typename S>
Tensor<S> encoder_masks(const Tensor<S>& attn_nk, int h, int w, int H, int W) {
  int N = attn_nk.rows(), K = attn_nk.cols();
  if (N != h * w) throw std::invalid_argument("encoder_masks: grid mismatch");
  Tensor<S> kn({K, N});
  for (int i = 0; i < N; ++i)
    for (int k = 0; k < K; ++k) kn.at(k, i) = attn_nk.at(i, k);
  return upsample_masks(kn, h, w, H, W);
}

}  // namespace slotdiff

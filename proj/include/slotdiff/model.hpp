#pragma once

#include "slotdiff/broadcast_decoder.hpp"
#include "slotdiff/config.hpp"
#include "slotdiff/dataset.hpp"
#include "slotdiff/diffusion.hpp"
#include "slotdiff/latent_ae.hpp"
#include "slotdiff/metrics.hpp"
#include "slotdiff/temporal.hpp"

// Full model assembly: backbone + slot encoder (SA or ISA), broadcast and
// diffusion decoders, temporal modules, and the forward paths the trainer
// and evaluator drive. All components are always built so checkpoints for a
// given config are uniform regardless of which path trains.

namespace slotdiff {

template <typename S>
struct Model {
  Config cfg;
  ParamSet<S> params;
  Backbone<S> backbone;
  SlotAttentionParams<S> sa;
  IsaParams<S> isa_params;
  BroadcastDecoderParams<S> bdec;
  MiniDenoiser<S> denoiser;
  NullConditioning<S> null_cond;
  LatentAE<S> ae;
  TemporalParams<S> temporal;
  NoiseSchedule sched;
  GuidanceConfig gcfg;

  void build(const Config& c) {
    cfg = c;
    config_validate(c);
    Rng rng(c.train_seed ^ 0x9e3779b97f4a7c15ull);
    int K = c.slots();
    backbone.init(c.encoder_d_feat, c.data_h, c.data_w, rng, params, "backbone");
    sa.init(K, c.encoder_d_feat, c.encoder_d_slot, c.encoder_d_key, c.encoder_iters, rng, params,
            "sa");
    sa.mean_aggregation = c.encoder_aggregation == "mean";
    sa.use_residual_mlp = c.encoder_residual_mlp != 0;
    isa_params.init(K, c.encoder_d_feat, c.encoder_d_slot, c.encoder_d_key, c.encoder_iters, rng,
                    params, "isa");
    isa_params.mean_aggregation = sa.mean_aggregation;
    bdec.init(c.encoder_d_slot, c.data_h, c.data_w, c.encoder_variant == "isa", rng, params,
              "bdec", c.decoder_width);

    DenoiserConfig dc;
    dc.in_channels = c.decoder_latent_mode ? 4 : 3;
    dc.c1 = c.decoder_base_channels;
    dc.c2 = 2 * c.decoder_base_channels;
    dc.c3 = 3 * c.decoder_base_channels;
    dc.d_cond_slots = c.video() ? (c.temporal_mode == "v1" ? 2 * c.encoder_d_slot : c.encoder_d_slot)
                                : c.encoder_d_slot;
    dc.d_cond_reg = c.video() && c.temporal_mode == "v1" ? c.encoder_d_feat : c.encoder_d_slot;
    dc.guidance_block = c.decoder_guidance_block;
    if (c.decoder_adapter_blocks == "updown")
      dc.adapters = {true, true, false, true, true};
    else if (c.decoder_adapter_blocks == "all")
      dc.adapters = {true, true, true, true, true};
    else if (c.decoder_adapter_blocks == "up")
      dc.adapters = {false, false, false, true, true};
    else
      dc.adapters = {true, true, false, false, false};
    if (!dc.adapters[size_t(dc.guidance_block)])
      throw std::invalid_argument("config: guidance block carries no adapter");
    denoiser.init(dc, rng, params, "denoiser");
    null_cond.init(dc.d_cond_slots, dc.d_cond_reg, rng, params, "null_cond");
    ae.init(4, rng, params, "ae");
    temporal.init(c.encoder_d_slot, std::max(c.data_l, 8), rng, params, "temporal");

    sched = make_schedule(c.decoder_t, c.decoder_beta_start, c.decoder_beta_end);
    gcfg.mode = guidance_mode_from_string(c.guidance_mode);
    gcfg.lambda = c.guidance_lambda;
    gcfg.warmup_iters = int(double(c.train_steps) * c.guidance_warmup_frac);
  }
};

// ---------------------------------------------------------------------------
// encoder forward
// ---------------------------------------------------------------------------

template <typename S>
struct EncodeOut {
  std::vector<Var<S>> slots;    // K x D per sample
  std::vector<Var<S>> attn_nk;  // N x K per sample (encoder mask source)
  std::vector<IsaStateVars<S>> isa_states;  // populated for the isa variant
};

// images: [B,3,H,W] in [0,1]
template <typename S>
EncodeOut<S> encode_images(Tape<S>& t, const Model<S>& m, Var<S> images, Rng& rng) {
  const Tensor<S>& iv = t.val(images);
  int B = iv.shape[0];
  int N = m.backbone.patches();
  Var<S> tokens = m.backbone(t, images);
  Var<S> grid = t.input(m.backbone.abs_grid());
  EncodeOut<S> out;
  for (int b = 0; b < B; ++b) {
    Var<S> tok_b = rows_slice(tokens, b * N, N);
    if (m.cfg.encoder_variant == "isa") {
      auto st = isa(t, tok_b, grid, m.isa_params, rng);
      out.slots.push_back(st.slots);
      out.attn_nk.push_back(transpose2(st.attn));
      out.isa_states.push_back(st);
    } else {
      auto st = slot_attention(t, tok_b, m.sa, rng);
      out.slots.push_back(st.slots);
      out.attn_nk.push_back(st.attn);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// broadcast path training loss (images)
// ---------------------------------------------------------------------------

template <typename S>
struct BroadcastStepOut {
  Var<S> loss;
  EncodeOut<S> enc;
};

template <typename S>
BroadcastStepOut<S> broadcast_loss_images(Tape<S>& t, const Model<S>& m, const Tensor<S>& images,
                                          Rng& rng) {
  int B = images.shape[0];
  Var<S> img_var = t.input(images);
  BroadcastStepOut<S> out;
  out.enc = encode_images(t, m, img_var, rng);
  Var<S> slots_all = concat_rows(out.enc.slots);  // (B*K) x D
  Var<S> pos, scale;
  if (m.cfg.encoder_variant == "isa") {
    std::vector<Var<S>> ps, ss;
    for (auto& st : out.enc.isa_states) {
      ps.push_back(st.pos);
      ss.push_back(st.scale);
    }
    pos = concat_rows(ps);
    scale = concat_rows(ss);
  }
  auto render = decode_slots(t, m.bdec, slots_all, B, pos, scale);
  auto comp = alpha_composite(t, render);
  out.loss = recon_loss(t, comp, img_var);
  return out;
}

// ---------------------------------------------------------------------------
// diffusion path training loss (images)
// ---------------------------------------------------------------------------

template <typename S>
struct DiffusionStepOut {
  Var<S> loss;            // total (diffusion + weighted guidance)
  Var<S> diffusion_term;  // scalar
  Var<S> guidance_term;   // scalar or invalid when inactive
};

template <typename S>
DiffusionStepOut<S> diffusion_loss_images(Tape<S>& t, const Model<S>& m, const Tensor<S>& images,
                                          Rng& rng, int64_t iter) {
  int B = images.shape[0];
  Var<S> img_var = t.input(images);
  EncodeOut<S> enc = encode_images(t, m, img_var, rng);

  // clean target in [-1,1]: pixels, or tanh-squashed latents in latent mode
  Tensor<S> x0;
  if (m.cfg.decoder_latent_mode) {
    Tape<S> scratch;
    NoGradScope<S> ng(scratch);
    x0 = scratch.val(m.ae.encode(scratch, scratch.input(images)));
  } else {
    x0 = images;
    for (auto& v : x0.data) v = S(2) * v - S(1);
  }

  std::vector<CondVars<S>> conds;
  for (int b = 0; b < B; ++b) conds.push_back(cond_from_slots(t, enc.slots[size_t(b)]));
  auto dl = diffusion_loss(t, denoiser_fn(m.denoiser), m.null_cond, x0, conds, m.sched, rng,
                           m.cfg.decoder_p_null);

  DiffusionStepOut<S> out;
  out.diffusion_term = dl.loss;
  bool want_guidance = m.gcfg.mode != GuidanceMode::None && m.gcfg.lambda > 0 &&
                       iter >= m.gcfg.warmup_iters && !dl.attn_dm.empty();
  if (want_guidance) {
    Var<S> acc;
    int n = 0;
    for (int b = 0; b < B; ++b) {
      if (dl.nulled[size_t(b)]) continue;
      Var<S> g;
      if (m.cfg.guidance_swap_bce) {
        // reversed argument order, available behind a flag
        Var<S> resized = bilinear_resize_rows(dl.attn_dm[size_t(b)], dl.guidance_h,
                                              dl.guidance_w, m.backbone.grid_h, m.backbone.grid_w);
        Var<S> pred = enc.attn_nk[size_t(b)];
        Var<S> target = transpose2(resized);
        if (m.gcfg.mode == GuidanceMode::Slot) pred = detach(pred);
        if (m.gcfg.mode == GuidanceMode::Dm) target = detach(target);
        g = bce_loss(target, pred, S(1e-7));
      } else {
        g = guidance_loss(t, enc.attn_nk[size_t(b)], dl.attn_dm[size_t(b)], dl.guidance_h,
                          dl.guidance_w, m.backbone.grid_h, m.backbone.grid_w, m.gcfg.mode);
      }
      acc = n == 0 ? g : add(acc, g);
      ++n;
    }
    if (n > 0) out.guidance_term = scale(acc, S(1.0 / n));
  }
  out.loss = total_loss(t, out.diffusion_term, out.guidance_term, m.gcfg, iter);
  return out;
}

// ---------------------------------------------------------------------------
// video: per-frame ISA with propagated init + temporal conditioning
// ---------------------------------------------------------------------------

template <typename S>
struct VideoEncodeOut {
  std::vector<IsaStateVars<S>> states;      // per frame
  std::vector<Var<S>> frame_tokens;         // per frame, N x d
  std::vector<Var<S>> cond_slots;           // per frame: K x 2D (v1) or K x D (v2)
  std::vector<Var<S>> cond_register;        // per frame: 1 x d
};

// Runs ISA frame by frame (slot j at frame t+1 starts from slot j at frame
// t) and builds the temporal conditioning for the configured variant.
template <typename S>
VideoEncodeOut<S> encode_clip(Tape<S>& t, const Model<S>& m, const Tensor<S>& frames, Rng& rng) {
  int L = frames.shape[0];
  int N = m.backbone.patches();
  VideoEncodeOut<S> out;
  Var<S> grid = t.input(m.backbone.abs_grid());
  IsaWarmStart<S> warm;
  for (int f = 0; f < L; ++f) {
    Tensor<S> one({1, 3, frames.shape[2], frames.shape[3]});
    std::copy_n(frames.data.data() + int64_t(f) * one.numel(), one.numel(), one.data.data());
    Var<S> tokens = m.backbone(t, t.input(std::move(one)));
    Var<S> tok = rows_slice(tokens, 0, N);
    out.frame_tokens.push_back(tok);
    auto st = isa(t, tok, grid, m.isa_params, rng, warm.valid ? &warm : nullptr);
    out.states.push_back(st);
    warm.valid = true;
    warm.slots = t.val(st.slots);
    warm.pos = t.val(st.pos);
    warm.scale = t.val(st.scale);
  }
  if (m.cfg.temporal_mode == "v2") {
    auto fused = fuse_pose_v2(t, out.states, grid, m.temporal);
    out.cond_slots = fused.fused;
    out.cond_register = fused.register_token;
  } else {
    std::vector<Var<S>> per_frame;
    for (auto& st : out.states) per_frame.push_back(st.slots);
    auto agg = aggregate_slots(t, per_frame, m.temporal);
    for (int f = 0; f < L; ++f)
      out.cond_slots.push_back(augment(per_frame[size_t(f)], agg[size_t(f)]));
    auto regs = aggregate_registers(t, out.frame_tokens, m.temporal);
    out.cond_register = regs.aggregated;
  }
  return out;
}

// The 1-frame training objective: encode the whole clip, pick one frame,
// and predict its injected noise conditioned on the temporally aggregated
// representations of that frame. `model_fn` substitutes the denoiser (tests
// pass oracle stubs); the default routes to the model's own denoiser.
template <typename S>
DiffusionStepOut<S> one_frame_step(Tape<S>& t, const Model<S>& m, const Tensor<S>& frames,
                                   Rng& rng, int64_t iter,
                                   const DenoiserFn<S>* model_fn = nullptr) {
  int L = frames.shape[0];
  VideoEncodeOut<S> enc = encode_clip(t, m, frames, rng);
  int target = rng.uniform_int(0, L - 1);

  Tensor<S> x0({1, 3, frames.shape[2], frames.shape[3]});
  std::copy_n(frames.data.data() + int64_t(target) * x0.numel(), x0.numel(), x0.data.data());
  for (auto& v : x0.data) v = S(2) * v - S(1);

  std::vector<CondVars<S>> conds{
      {enc.cond_slots[size_t(target)], enc.cond_register[size_t(target)], false}};
  auto dl = diffusion_loss(t, model_fn != nullptr ? *model_fn : denoiser_fn(m.denoiser),
                           m.null_cond, x0, conds, m.sched, rng, m.cfg.decoder_p_null);

  DiffusionStepOut<S> out;
  out.diffusion_term = dl.loss;
  bool want_guidance = m.gcfg.mode != GuidanceMode::None && m.gcfg.lambda > 0 &&
                       iter >= m.gcfg.warmup_iters && !dl.attn_dm.empty() && !dl.nulled[0];
  if (want_guidance) {
    Var<S> a_sa = transpose2(enc.states[size_t(target)].attn);  // N x K
    out.guidance_term = guidance_loss(t, a_sa, dl.attn_dm[0], dl.guidance_h, dl.guidance_w,
                                      m.backbone.grid_h, m.backbone.grid_w, m.gcfg.mode);
  }
  out.loss = total_loss(t, out.diffusion_term, out.guidance_term, m.gcfg, iter);
  return out;
}

// Broadcast-path video loss: per-frame ISA with propagated init, then the
// 1-frame strategy applied to the deterministic decoder — one random frame
// is reconstructed from its slots and poses.
template <typename S>
BroadcastStepOut<S> broadcast_loss_clip(Tape<S>& t, const Model<S>& m, const Tensor<S>& frames,
                                        Rng& rng, int* picked_frame = nullptr) {
  int L = frames.shape[0];
  VideoEncodeOut<S> enc = encode_clip(t, m, frames, rng);
  int target = rng.uniform_int(0, L - 1);
  if (picked_frame != nullptr) *picked_frame = target;
  const IsaStateVars<S>& st = enc.states[size_t(target)];
  auto render = decode_slots(t, m.bdec, st.slots, 1, st.pos, st.scale);
  auto comp = alpha_composite(t, render);
  Tensor<S> img({1, 3, frames.shape[2], frames.shape[3]});
  std::copy_n(frames.data.data() + int64_t(target) * img.numel(), img.numel(), img.data.data());
  BroadcastStepOut<S> out;
  out.loss = recon_loss(t, comp, t.input(std::move(img)));
  for (auto& s : enc.states) {
    out.enc.isa_states.push_back(s);
    out.enc.slots.push_back(s.slots);
    out.enc.attn_nk.push_back(transpose2(s.attn));
  }
  return out;
}

// ---------------------------------------------------------------------------
// value-level helpers shared by eval / sampling / editing
// ---------------------------------------------------------------------------

template <typename S>
struct EncodedSample {
  Tensor<S> slots;    // K x D
  Tensor<S> attn_nk;  // N x K
  Tensor<S> pos, scale;  // isa only
};

template <typename S>
EncodedSample<S> encode_sample_value(const Model<S>& m, const SceneSample& sample, Rng& rng) {
  Tape<S> t;
  NoGradScope<S> ng(t);
  TensorF chw_f = sample.image_chw();
  Tensor<S> chw = chw_f.template cast<S>();
  chw.shape.insert(chw.shape.begin(), 1);
  auto enc = encode_images(t, m, t.input(std::move(chw)), rng);
  EncodedSample<S> out;
  out.slots = t.val(enc.slots[0]);
  out.attn_nk = t.val(enc.attn_nk[0]);
  if (!enc.isa_states.empty()) {
    out.pos = t.val(enc.isa_states[0].pos);
    out.scale = t.val(enc.isa_states[0].scale);
  }
  return out;
}

// Predicted segmentation labels (1..K) for one sample, via upsampled
// encoder masks.
template <typename S>
std::vector<int> predicted_labels(const Model<S>& m, const EncodedSample<S>& enc) {
  Tensor<S> masks = encoder_masks(enc.attn_nk, m.backbone.grid_h, m.backbone.grid_w, m.cfg.data_h,
                                  m.cfg.data_w);
  return masks_argmax(masks);
}

// Broadcast-path reconstruction of one encoded sample.
template <typename S>
Tensor<S> broadcast_reconstruct(const Model<S>& m, const EncodedSample<S>& enc) {
  Tape<S> t;
  NoGradScope<S> ng(t);
  Var<S> pos, scl;
  if (m.cfg.encoder_variant == "isa") {
    pos = t.input(enc.pos);
    scl = t.input(enc.scale);
  }
  auto render = decode_slots(t, m.bdec, t.input(enc.slots), 1, pos, scl);
  auto comp = alpha_composite(t, render);
  Tensor<S> img = t.val(comp.image);
  img.shape = {3, m.cfg.data_h, m.cfg.data_w};
  return img;
}

// Per-frame conditioning bundles of a clip (values), for sampling and
// editing in video mode.
template <typename S>
std::vector<ConditioningBundle<S>> clip_bundles_value(const Model<S>& m,
                                                      const std::vector<SceneSample>& frames,
                                                      Rng& rng) {
  Tape<S> t;
  NoGradScope<S> ng(t);
  int L = int(frames.size()), H = frames[0].H, W = frames[0].W;
  Tensor<S> clip({L, 3, H, W});
  for (int f = 0; f < L; ++f) {
    TensorF chw = frames[size_t(f)].image_chw();
    for (int64_t i = 0; i < chw.numel(); ++i) clip.data[int64_t(f) * chw.numel() + i] = S(chw[i]);
  }
  auto enc = encode_clip(t, m, clip, rng);
  std::vector<ConditioningBundle<S>> out;
  for (int f = 0; f < L; ++f) {
    ConditioningBundle<S> b;
    b.slots = t.val(enc.cond_slots[size_t(f)]);
    b.register_token = t.val(enc.cond_register[size_t(f)]);
    out.push_back(std::move(b));
  }
  return out;
}

// Diffusion-path sample conditioned on a bundle; returns an image in [0,1].
template <typename S>
Tensor<S> diffusion_sample(const Model<S>& m, const ConditioningBundle<S>& bundle, Rng& rng,
                           double cfg_scale) {
  if (m.cfg.decoder_latent_mode) {
    Tensor<S> z = p_sample_loop(m.denoiser, m.null_cond, bundle, m.sched, rng, cfg_scale,
                                m.cfg.data_h / 2, m.cfg.data_w / 2);
    for (auto& v : z.data) v = S(2) * v - S(1);  // p_sample_loop maps to [0,1]; undo for latents
    return m.ae.decode_value(z);
  }
  return p_sample_loop(m.denoiser, m.null_cond, bundle, m.sched, rng, cfg_scale, m.cfg.data_h,
                       m.cfg.data_w);
}

}  // namespace slotdiff

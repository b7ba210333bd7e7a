#pragma once

#include "slotdiff/denoiser.hpp"

// Attention guidance: binary cross-entropy alignment between the encoder's
// slot-attention masks and the decoder's adapter attention masks, with
// configurable gradient routing.

namespace slotdiff {

enum class GuidanceMode { None, Slot, Dm, Joint };

struct GuidanceConfig {
  GuidanceMode mode = GuidanceMode::None;
  double lambda = 0.1;
  int warmup_iters = 0;
};

inline GuidanceMode guidance_mode_from_string(const std::string& s) {
  if (s == "none") return GuidanceMode::None;
  if (s == "slot") return GuidanceMode::Slot;
  if (s == "dm") return GuidanceMode::Dm;
  if (s == "joint") return GuidanceMode::Joint;
  throw std::invalid_argument("unknown guidance mode: " + s);
}

// attn_sa: N x K encoder attention (rows sum to 1 over slots).
// attn_dm: K x M decoder adapter attention from the guidance block, M =
// gh*gw. The decoder mask is bilinearly resized onto the encoder's patch
// grid (eh x ew, N = eh*ew), transposed, and compared by BCE with the
// encoder mask as target. Gradient routing: Slot trains only the encoder,
// Dm only the decoder, Joint both.
template <typename S>
Var<S> guidance_loss(Tape<S>& t, Var<S> attn_sa, Var<S> attn_dm, int gh, int gw, int eh, int ew,
                     GuidanceMode mode) {
  const Tensor<S>& sa = t.val(attn_sa);
  const Tensor<S>& dm = t.val(attn_dm);
  if (sa.cols() != dm.rows())
    throw std::invalid_argument("guidance_loss: slot count mismatch between masks");
  if (dm.cols() != gh * gw || sa.rows() != eh * ew)
    throw std::invalid_argument("guidance_loss: grid mismatch");
  Var<S> resized = bilinear_resize_rows(attn_dm, gh, gw, eh, ew);  // K x N
  Var<S> pred = transpose2(resized);                               // N x K
  Var<S> target = attn_sa;
  if (mode == GuidanceMode::Slot) pred = detach(pred);
  if (mode == GuidanceMode::Dm) target = detach(target);
  return bce_loss(target, pred, S(1e-7));
}

// L = L_theta + lambda * L_guidance, with the guidance term disabled before
// the warmup iteration.
template <typename S>
Var<S> total_loss(Tape<S>& t, Var<S> diffusion_term, Var<S> guidance_term,
                  const GuidanceConfig& gcfg, int64_t iter) {
  if (gcfg.mode == GuidanceMode::None || gcfg.lambda <= 0.0 || iter < gcfg.warmup_iters ||
      !guidance_term.valid())
    return diffusion_term;
  return add(diffusion_term, scale(guidance_term, S(gcfg.lambda)));
}

}  // namespace slotdiff

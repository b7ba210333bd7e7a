#pragma once

#include <functional>

#include "slotdiff/guidance.hpp"

// The training-time diffusion objective: per batch item draw a timestep and
// a noise sample, corrupt the clean input with the closed-form forward
// process, optionally drop the conditioning (classifier-free guidance
// training), and score the denoiser's noise prediction by mean squared
// error.

namespace slotdiff {

// Model hook so tests can substitute oracle denoisers; the production hook
// wraps MiniDenoiser::predict_noise.
template <typename S>
using DenoiserFn = std::function<DenoiseOut<S>(Tape<S>&, Var<S> x_t, const std::vector<int>& ts,
                                               const std::vector<CondVars<S>>&)>;

template <typename S>
DenoiserFn<S> denoiser_fn(const MiniDenoiser<S>& den) {
  return [&den](Tape<S>& t, Var<S> x_t, const std::vector<int>& ts,
                const std::vector<CondVars<S>>& conds) {
    return predict_noise(t, den, x_t, ts, conds);
  };
}

template <typename S>
struct DiffusionLossOut {
  Var<S> loss;                   // scalar mean squared noise-prediction error
  std::vector<Var<S>> attn_dm;   // guidance-block adapter attention per item
  std::vector<char> nulled;      // which items had their conditioning dropped
  std::vector<int> ts;           // sampled timesteps
  int guidance_h = 0, guidance_w = 0;
};

// x0 holds the clean batch in [-1,1], [B,C,H,W]. `conds` come from the
// encoder; items hit by condition dropout are swapped for the learned null
// embeddings before the denoiser runs.
template <typename S>
DiffusionLossOut<S> diffusion_loss(Tape<S>& t, const DenoiserFn<S>& model,
                                   const NullConditioning<S>& null_cond, const Tensor<S>& x0,
                                   std::vector<CondVars<S>> conds, const NoiseSchedule& sched,
                                   Rng& rng, double p_null) {
  if (x0.rank() != 4 || x0.shape[0] < 1) throw std::invalid_argument("diffusion_loss: empty batch");
  int B = x0.shape[0];
  if (int(conds.size()) != B) throw std::invalid_argument("diffusion_loss: cond batch mismatch");
  int64_t per = x0.numel() / B;

  DiffusionLossOut<S> out;
  Tensor<S> eps(x0.shape), xt(x0.shape);
  for (int b = 0; b < B; ++b) {
    int tstep = rng.uniform_int(0, sched.T - 1);
    out.ts.push_back(tstep);
    bool drop = rng.uniform() < p_null;
    out.nulled.push_back(char(drop));
    if (drop) conds[size_t(b)] = null_cond.vars(t);
    Tensor<S> eps_b({int(per)});
    for (int64_t i = 0; i < per; ++i) eps_b[i] = S(rng.normal());
    Tensor<S> x0_b({int(per)});
    std::copy_n(x0.data.data() + size_t(b) * per, per, x0_b.data.data());
    Tensor<S> xt_b = q_sample(x0_b, tstep, eps_b, sched);
    std::copy_n(eps_b.data.data(), per, eps.data.data() + size_t(b) * per);
    std::copy_n(xt_b.data.data(), per, xt.data.data() + size_t(b) * per);
  }
  DenoiseOut<S> pred = model(t, t.input(std::move(xt)), out.ts, conds);
  out.loss = mse_loss(pred.eps_hat, t.input(std::move(eps)));
  out.attn_dm = std::move(pred.attn_dm);
  out.guidance_h = pred.guidance_h;
  out.guidance_w = pred.guidance_w;
  return out;
}

}  // namespace slotdiff

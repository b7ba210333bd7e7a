#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "slotdiff/tensor.hpp"

// DDPM forward-process constants and the closed-form identities built on
// them: arbitrary-step noising and the reparameterized posterior mean.

namespace slotdiff {

struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;           // variance schedule
  std::vector<double> alpha;          // 1 - beta
  std::vector<double> alpha_bar;      // running product of alpha
  std::vector<double> posterior_var;  // (1 - abar_{t-1}) / (1 - abar_t) * beta_t
};

inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw std::invalid_argument("make_schedule: T >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(size_t(T));
  s.alpha.resize(size_t(T));
  s.alpha_bar.resize(size_t(T));
  s.posterior_var.resize(size_t(T));
  double acc = 1.0;
  for (int t = 0; t < T; ++t) {
    double b = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * t / double(T - 1);
    s.beta[size_t(t)] = b;
    s.alpha[size_t(t)] = 1.0 - b;
    double prev_bar = acc;
    acc *= 1.0 - b;
    s.alpha_bar[size_t(t)] = acc;
    s.posterior_var[size_t(t)] = (1.0 - (t == 0 ? 1.0 : s.alpha_bar[size_t(t - 1)])) /
                                 (1.0 - acc) * b;
    (void)prev_bar;
  }
  return s;
}

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
template <typename S>
Tensor<S> q_sample(const Tensor<S>& x0, int t, const Tensor<S>& eps, const NoiseSchedule& sched) {
  if (t < 0 || t >= sched.T) throw std::invalid_argument("q_sample: t out of range");
  if (!x0.same_shape(eps)) throw std::invalid_argument("q_sample: shape mismatch");
  double ab = sched.alpha_bar[size_t(t)];
  S a = S(std::sqrt(ab)), b = S(std::sqrt(1.0 - ab));
  Tensor<S> out(x0.shape);
  for (int64_t i = 0; i < x0.numel(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

// Recover x0 from (x_t, eps, t); the algebraic inverse of q_sample.
template <typename S>
Tensor<S> invert_q_sample(const Tensor<S>& xt, int t, const Tensor<S>& eps,
                          const NoiseSchedule& sched) {
  if (t < 0 || t >= sched.T) throw std::invalid_argument("invert_q_sample: t out of range");
  double ab = sched.alpha_bar[size_t(t)];
  S a = S(std::sqrt(ab)), b = S(std::sqrt(1.0 - ab));
  Tensor<S> out(xt.shape);
  for (int64_t i = 0; i < xt.numel(); ++i) out[i] = (xt[i] - b * eps[i]) / a;
  return out;
}

// mu_theta(x_t, t) = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)
template <typename S>
Tensor<S> posterior_mean(const Tensor<S>& xt, int t, const Tensor<S>& eps_hat,
                         const NoiseSchedule& sched) {
  if (t < 0 || t >= sched.T) throw std::invalid_argument("posterior_mean: t out of range");
  if (!xt.same_shape(eps_hat)) throw std::invalid_argument("posterior_mean: shape mismatch");
  double ab = sched.alpha_bar[size_t(t)];
  S coef = S(sched.beta[size_t(t)] / std::sqrt(1.0 - ab));
  S inv_sqrt_alpha = S(1.0 / std::sqrt(sched.alpha[size_t(t)]));
  Tensor<S> out(xt.shape);
  for (int64_t i = 0; i < xt.numel(); ++i) out[i] = (xt[i] - coef * eps_hat[i]) * inv_sqrt_alpha;
  return out;
}

// True-posterior mean given x0 (the tractable Gaussian's mean). Used as an
// algebraic cross-check of posterior_mean.
template <typename S>
Tensor<S> posterior_mean_from_x0(const Tensor<S>& xt, int t, const Tensor<S>& x0,
                                 const NoiseSchedule& sched) {
  double ab = sched.alpha_bar[size_t(t)];
  double ab_prev = t == 0 ? 1.0 : sched.alpha_bar[size_t(t - 1)];
  double bt = sched.beta[size_t(t)];
  S c0 = S(std::sqrt(ab_prev) * bt / (1.0 - ab));
  S ct = S(std::sqrt(sched.alpha[size_t(t)]) * (1.0 - ab_prev) / (1.0 - ab));
  Tensor<S> out(xt.shape);
  for (int64_t i = 0; i < xt.numel(); ++i) out[i] = c0 * x0[i] + ct * xt[i];
  return out;
}

}  // namespace slotdiff

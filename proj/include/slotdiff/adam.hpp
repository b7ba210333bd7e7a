#pragma once

#include <cmath>
#include <unordered_map>

#include "slotdiff/nn.hpp"

namespace slotdiff {

// Adam with linear learning-rate warmup and optional global-norm clipping.
// Parameters whose `trainable` flag is off are skipped, which is how the
// two-phase schedule freezes the base denoiser.
template <typename S>
class Adam {
 public:
  double lr = 3e-4;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int warmup_steps = 500;
  double grad_clip = 1.0;  // 0 disables

  explicit Adam(ParamSet<S>& params) : params_(&params) {
    for (Parameter<S>* p : params.items()) {
      state_[p].m = Tensor<S>(p->value.shape);
      state_[p].v = Tensor<S>(p->value.shape);
    }
  }

  int64_t step_count() const { return t_; }

  void step() {
    ++t_;
    double lr_t = lr;
    if (warmup_steps > 0 && t_ <= warmup_steps) lr_t = lr * double(t_) / double(warmup_steps);
    if (grad_clip > 0) {
      double norm_sq = 0;
      for (Parameter<S>* p : params_->items()) {
        if (!p->trainable) continue;
        for (int64_t i = 0; i < p->grad.numel(); ++i) norm_sq += double(p->grad[i]) * double(p->grad[i]);
      }
      double norm = std::sqrt(norm_sq);
      if (norm > grad_clip) {
        S s = S(grad_clip / norm);
        for (Parameter<S>* p : params_->items()) {
          if (!p->trainable) continue;
          for (auto& g : p->grad.data) g *= s;
        }
      }
    }
    double bc1 = 1.0 - std::pow(beta1, double(t_));
    double bc2 = 1.0 - std::pow(beta2, double(t_));
    for (Parameter<S>* p : params_->items()) {
      if (!p->trainable) continue;
      Moments& st = state_[p];
      for (int64_t i = 0; i < p->value.numel(); ++i) {
        double g = double(p->grad[i]);
        double m = beta1 * double(st.m[i]) + (1.0 - beta1) * g;
        double v = beta2 * double(st.v[i]) + (1.0 - beta2) * g * g;
        st.m[i] = S(m);
        st.v[i] = S(v);
        p->value[i] -= S(lr_t * (m / bc1) / (std::sqrt(v / bc2) + eps));
      }
    }
  }

  // Serialized as (t, then m/v per parameter in registry order).
  struct Moments {
    Tensor<S> m, v;
  };
  Moments& moments(Parameter<S>* p) { return state_[p]; }
  void set_step_count(int64_t t) { t_ = t; }

 private:
  ParamSet<S>* params_;
  std::unordered_map<Parameter<S>*, Moments> state_;
  int64_t t_ = 0;
};

}  // namespace slotdiff

#pragma once

#include <functional>

#include "slotdiff/nn.hpp"

namespace slotdiff {

// Central-difference verification of reverse-mode gradients.
//
// `loss_fn` must rebuild the computation from the current parameter values
// and return the scalar loss node. Reported value is
//   max over coordinates |analytic - numeric| / max(1, |analytic|).
template <typename S>
double grad_check(ParamSet<S>& params, const std::function<Var<S>(Tape<S>&)>& loss_fn,
                  double eps = 1e-5) {
  if (eps < 1e-6 || eps > 1e-3) throw std::invalid_argument("grad_check: eps out of [1e-6, 1e-3]");
  params.zero_grads();
  {
    Tape<S> tape;
    Var<S> loss = loss_fn(tape);
    tape.backward(loss);
  }
  auto eval = [&](void) -> double {
    Tape<S> tape;
    NoGradScope<S> ng(tape);
    double v = double(scalar_value(loss_fn(tape)));
    if (!std::isfinite(v)) throw std::runtime_error("grad_check: non-finite loss at perturbed point");
    return v;
  };
  double worst = 0.0;
  for (Parameter<S>* p : params.items()) {
    for (int64_t i = 0; i < p->value.numel(); ++i) {
      S saved = p->value[i];
      p->value[i] = saved + S(eps);
      double fp = eval();
      p->value[i] = saved - S(eps);
      double fm = eval();
      p->value[i] = saved;
      double numeric = (fp - fm) / (2.0 * eps);
      double analytic = double(p->grad[i]);
      double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace slotdiff

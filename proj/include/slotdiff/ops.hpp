#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "slotdiff/tape.hpp"

// Differentiable operations on tape variables. Free functions; every op
// records a closure that accumulates (+=) into its parents' gradients, so
// fan-out handles itself. Shapes are validated at call time.

namespace slotdiff {

namespace detail {

template <typename S>
inline Tape<S>& same_tape(Var<S> a, Var<S> b) {
  if (a.tape != b.tape || a.tape == nullptr) throw std::invalid_argument("ops: vars on different tapes");
  return *a.tape;
}

template <typename S>
inline S stable_sigmoid(S x) {
  if (x >= S(0)) {
    S e = std::exp(-x);
    return S(1) / (S(1) + e);
  }
  S e = std::exp(x);
  return e / (S(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary (identical shapes)
// ---------------------------------------------------------------------------

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape(a, b);
  const Tensor<S>& av = t.val(a);
  const Tensor<S>& bv = t.val(b);
  if (!av.same_shape(bv)) throw std::invalid_argument("add: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
  Tensor<S> out(av.shape);
  out.vec() = av.vec() + bv.vec();
  bool na = t.needs_grad(a), nb = t.needs_grad(b);
  int ai = a.id, bi = b.id, oi = int(t.size());
  return t.make(std::move(out), na || nb, [ai, bi, oi, na, nb](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    if (na) tt.grad(ai).vec() += g.vec();
    if (nb) tt.grad(bi).vec() += g.vec();
  });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape(a, b);
  const Tensor<S>& av = t.val(a);
  const Tensor<S>& bv = t.val(b);
  if (!av.same_shape(bv)) throw std::invalid_argument("sub: shape mismatch");
  Tensor<S> out(av.shape);
  out.vec() = av.vec() - bv.vec();
  bool na = t.needs_grad(a), nb = t.needs_grad(b);
  int ai = a.id, bi = b.id, oi = int(t.size());
  return t.make(std::move(out), na || nb, [ai, bi, oi, na, nb](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    if (na) tt.grad(ai).vec() += g.vec();
    if (nb) tt.grad(bi).vec() -= g.vec();
  });
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape(a, b);
  const Tensor<S>& av = t.val(a);
  const Tensor<S>& bv = t.val(b);
  if (!av.same_shape(bv)) throw std::invalid_argument("mul: shape mismatch");
  Tensor<S> out(av.shape);
  out.vec() = av.vec().cwiseProduct(bv.vec());
  bool na = t.needs_grad(a), nb = t.needs_grad(b);
  int ai = a.id, bi = b.id, oi = int(t.size());
  return t.make(std::move(out), na || nb, [ai, bi, oi, na, nb](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    if (na) tt.grad(ai).vec() += g.vec().cwiseProduct(tt.val(bi).vec());
    if (nb) tt.grad(bi).vec() += g.vec().cwiseProduct(tt.val(ai).vec());
  });
}

// ---------------------------------------------------------------------------
// scalar-argument ops
// ---------------------------------------------------------------------------

template <typename S>
Var<S> scale(Var<S> x, S c) {
  Tape<S>& t = *x.tape;
  Tensor<S> out(t.val(x).shape);
  out.vec() = t.val(x).vec() * c;
  int xi = x.id, oi = int(t.size());
  return t.make(std::move(out), t.needs_grad(x), [xi, oi, c](Tape<S>& tt) {
    tt.grad(xi).vec() += tt.grad(oi).vec() * c;
  });
}

template <typename S>
Var<S> add_const(Var<S> x, S c) {
  Tape<S>& t = *x.tape;
  Tensor<S> out(t.val(x).shape);
  out.vec() = t.val(x).vec().array() + c;
  int xi = x.id, oi = int(t.size());
  return t.make(std::move(out), t.needs_grad(x), [xi, oi](Tape<S>& tt) {
    tt.grad(xi).vec() += tt.grad(oi).vec();
  });
}

template <typename S>
Var<S> neg(Var<S> x) {
  return scale(x, S(-1));
}

// ---------------------------------------------------------------------------
// elementwise unary
// ---------------------------------------------------------------------------

template <typename S>
Var<S> relu(Var<S> x) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = t.val(x);
  Tensor<S> out(xv.shape);
  for (int64_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] > S(0) ? xv[i] : S(0);
  int xi = x.id, oi = int(t.size());
  return t.make(std::move(out), t.needs_grad(x), [xi, oi](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    const Tensor<S>& xv2 = tt.val(xi);
    Tensor<S>& gx = tt.grad(xi);
    for (int64_t i = 0; i < g.numel(); ++i)
      if (xv2[i] > S(0)) gx[i] += g[i];
  });
}

template <typename S>
Var<S> sigmoid_v(Var<S> x) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = t.val(x);
  Tensor<S> out(xv.shape);
  for (int64_t i = 0; i < xv.numel(); ++i) out[i] = detail::stable_sigmoid(xv[i]);
  int xi = x.id, oi = int(t.size());
  return t.make(std::move(out), t.needs_grad(x), [xi, oi](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    const Tensor<S>& y = tt.val(oi);
    Tensor<S>& gx = tt.grad(xi);
    for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * y[i] * (S(1) - y[i]);
  });
}

template <typename S>
Var<S> tanh_v(Var<S> x) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = t.val(x);
  Tensor<S> out(xv.shape);
  for (int64_t i = 0; i < xv.numel(); ++i) out[i] = std::tanh(xv[i]);
  int xi = x.id, oi = int(t.size());
  return t.make(std::move(out), t.needs_grad(x), [xi, oi](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    const Tensor<S>& y = tt.val(oi);
    Tensor<S>& gx = tt.grad(xi);
    for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * (S(1) - y[i] * y[i]);
  });
}

template <typename S>
Var<S> silu(Var<S> x) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = t.val(x);
  Tensor<S> out(xv.shape);
  for (int64_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] * detail::stable_sigmoid(xv[i]);
  int xi = x.id, oi = int(t.size());
  return t.make(std::move(out), t.needs_grad(x), [xi, oi](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    const Tensor<S>& xv2 = tt.val(xi);
    Tensor<S>& gx = tt.grad(xi);
    for (int64_t i = 0; i < g.numel(); ++i) {
      S s = detail::stable_sigmoid(xv2[i]);
      gx[i] += g[i] * (s + xv2[i] * s * (S(1) - s));
    }
  });
}

template <typename S>
Var<S> exp_v(Var<S> x) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = t.val(x);
  Tensor<S> out(xv.shape);
  for (int64_t i = 0; i < xv.numel(); ++i) out[i] = std::exp(xv[i]);
  int xi = x.id, oi = int(t.size());
  return t.make(std::move(out), t.needs_grad(x), [xi, oi](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    const Tensor<S>& y = tt.val(oi);
    Tensor<S>& gx = tt.grad(xi);
    for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * y[i];
  });
}

// y = sqrt(x + eps). eps keeps the derivative finite at x == 0.
template <typename S>
Var<S> sqrt_eps(Var<S> x, S eps) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = t.val(x);
  Tensor<S> out(xv.shape);
  for (int64_t i = 0; i < xv.numel(); ++i) out[i] = std::sqrt(xv[i] + eps);
  int xi = x.id, oi = int(t.size());
  return t.make(std::move(out), t.needs_grad(x), [xi, oi](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    const Tensor<S>& y = tt.val(oi);
    Tensor<S>& gx = tt.grad(xi);
    for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i] / (S(2) * y[i]);
  });
}

template <typename S>
Var<S> square(Var<S> x) {
  return mul(x, x);
}

template <typename S>
Var<S> clamp_min_v(Var<S> x, S lo) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = t.val(x);
  Tensor<S> out(xv.shape);
  for (int64_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] < lo ? lo : xv[i];
  int xi = x.id, oi = int(t.size());
  return t.make(std::move(out), t.needs_grad(x), [xi, oi, lo](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    const Tensor<S>& xv2 = tt.val(xi);
    Tensor<S>& gx = tt.grad(xi);
    for (int64_t i = 0; i < g.numel(); ++i)
      if (xv2[i] >= lo) gx[i] += g[i];
  });
}

template <typename S>
Var<S> clamp_range(Var<S> x, S lo, S hi) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = t.val(x);
  Tensor<S> out(xv.shape);
  for (int64_t i = 0; i < xv.numel(); ++i) out[i] = std::min(hi, std::max(lo, xv[i]));
  int xi = x.id, oi = int(t.size());
  return t.make(std::move(out), t.needs_grad(x), [xi, oi, lo, hi](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    const Tensor<S>& xv2 = tt.val(xi);
    Tensor<S>& gx = tt.grad(xi);
    for (int64_t i = 0; i < g.numel(); ++i)
      if (xv2[i] >= lo && xv2[i] <= hi) gx[i] += g[i];
  });
}

// Value passes through, gradient does not.
template <typename S>
Var<S> detach(Var<S> x) {
  Tape<S>& t = *x.tape;
  return t.input(t.val(x));
}

// ---------------------------------------------------------------------------
// broadcast over rows / columns of a 2-d tensor
// ---------------------------------------------------------------------------

namespace detail {
template <typename S>
inline void check_rowvec(const Tensor<S>& x, const Tensor<S>& v, const char* who) {
  bool ok = (v.numel() == x.cols()) && (v.rank() == 1 || (v.rank() == 2 && v.shape[0] == 1));
  if (x.rank() != 2 || !ok) throw std::invalid_argument(std::string(who) + ": expected R x C with C row vector");
}
template <typename S>
inline void check_colvec(const Tensor<S>& x, const Tensor<S>& v, const char* who) {
  bool ok = (v.numel() == x.rows()) && (v.rank() == 1 || (v.rank() == 2 && v.shape[1] == 1));
  if (x.rank() != 2 || !ok) throw std::invalid_argument(std::string(who) + ": expected R x C with R column vector");
}
}  // namespace detail

template <typename S>
Var<S> add_rowvec(Var<S> x, Var<S> v) {
  Tape<S>& t = detail::same_tape(x, v);
  const Tensor<S>& xv = t.val(x);
  const Tensor<S>& vv = t.val(v);
  detail::check_rowvec(xv, vv, "add_rowvec");
  Tensor<S> out(xv.shape);
  out.mat() = xv.mat().rowwise() + ConstVecMap<S>(vv.data.data(), xv.cols()).transpose();
  bool nx = t.needs_grad(x), nv = t.needs_grad(v);
  int xi = x.id, vi = v.id, oi = int(t.size());
  return t.make(std::move(out), nx || nv, [xi, vi, oi, nx, nv](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    if (nx) tt.grad(xi).vec() += g.vec();
    if (nv) {
      Tensor<S>& gv = tt.grad(vi);
      VecMap<S>(gv.data.data(), g.cols()) += g.mat().colwise().sum().transpose();
    }
  });
}

template <typename S>
Var<S> sub_rowvec(Var<S> x, Var<S> v) {
  Tape<S>& t = detail::same_tape(x, v);
  const Tensor<S>& xv = t.val(x);
  const Tensor<S>& vv = t.val(v);
  detail::check_rowvec(xv, vv, "sub_rowvec");
  Tensor<S> out(xv.shape);
  out.mat() = xv.mat().rowwise() - ConstVecMap<S>(vv.data.data(), xv.cols()).transpose();
  bool nx = t.needs_grad(x), nv = t.needs_grad(v);
  int xi = x.id, vi = v.id, oi = int(t.size());
  return t.make(std::move(out), nx || nv, [xi, vi, oi, nx, nv](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    if (nx) tt.grad(xi).vec() += g.vec();
    if (nv) {
      Tensor<S>& gv = tt.grad(vi);
      VecMap<S>(gv.data.data(), g.cols()) -= g.mat().colwise().sum().transpose();
    }
  });
}

template <typename S>
Var<S> mul_rowvec(Var<S> x, Var<S> v) {
  Tape<S>& t = detail::same_tape(x, v);
  const Tensor<S>& xv = t.val(x);
  const Tensor<S>& vv = t.val(v);
  detail::check_rowvec(xv, vv, "mul_rowvec");
  Tensor<S> out(xv.shape);
  int R = xv.rows(), C = xv.cols();
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) out.at(r, c) = xv.at(r, c) * vv[c];
  bool nx = t.needs_grad(x), nv = t.needs_grad(v);
  int xi = x.id, vi = v.id, oi = int(t.size());
  return t.make(std::move(out), nx || nv, [xi, vi, oi, nx, nv, R, C](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    const Tensor<S>& xv2 = tt.val(xi);
    const Tensor<S>& vv2 = tt.val(vi);
    if (nx) {
      Tensor<S>& gx = tt.grad(xi);
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) gx.at(r, c) += g.at(r, c) * vv2[c];
    }
    if (nv) {
      Tensor<S>& gv = tt.grad(vi);
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) gv[c] += g.at(r, c) * xv2.at(r, c);
    }
  });
}

template <typename S>
Var<S> div_rowvec(Var<S> x, Var<S> v) {
  Tape<S>& t = detail::same_tape(x, v);
  const Tensor<S>& xv = t.val(x);
  const Tensor<S>& vv = t.val(v);
  detail::check_rowvec(xv, vv, "div_rowvec");
  Tensor<S> out(xv.shape);
  int R = xv.rows(), C = xv.cols();
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) out.at(r, c) = xv.at(r, c) / vv[c];
  bool nx = t.needs_grad(x), nv = t.needs_grad(v);
  int xi = x.id, vi = v.id, oi = int(t.size());
  return t.make(std::move(out), nx || nv, [xi, vi, oi, nx, nv, R, C](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    const Tensor<S>& y = tt.val(oi);
    const Tensor<S>& vv2 = tt.val(vi);
    if (nx) {
      Tensor<S>& gx = tt.grad(xi);
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) gx.at(r, c) += g.at(r, c) / vv2[c];
    }
    if (nv) {
      Tensor<S>& gv = tt.grad(vi);
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) gv[c] -= g.at(r, c) * y.at(r, c) / vv2[c];
    }
  });
}

template <typename S>
Var<S> mul_colvec(Var<S> x, Var<S> d) {
  Tape<S>& t = detail::same_tape(x, d);
  const Tensor<S>& xv = t.val(x);
  const Tensor<S>& dv = t.val(d);
  detail::check_colvec(xv, dv, "mul_colvec");
  Tensor<S> out(xv.shape);
  int R = xv.rows(), C = xv.cols();
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) out.at(r, c) = xv.at(r, c) * dv[r];
  bool nx = t.needs_grad(x), nd = t.needs_grad(d);
  int xi = x.id, di = d.id, oi = int(t.size());
  return t.make(std::move(out), nx || nd, [xi, di, oi, nx, nd, R, C](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    const Tensor<S>& xv2 = tt.val(xi);
    const Tensor<S>& dv2 = tt.val(di);
    if (nx) {
      Tensor<S>& gx = tt.grad(xi);
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) gx.at(r, c) += g.at(r, c) * dv2[r];
    }
    if (nd) {
      Tensor<S>& gd = tt.grad(di);
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) gd[r] += g.at(r, c) * xv2.at(r, c);
    }
  });
}

template <typename S>
Var<S> div_colvec(Var<S> x, Var<S> d) {
  Tape<S>& t = detail::same_tape(x, d);
  const Tensor<S>& xv = t.val(x);
  const Tensor<S>& dv = t.val(d);
  detail::check_colvec(xv, dv, "div_colvec");
  Tensor<S> out(xv.shape);
  int R = xv.rows(), C = xv.cols();
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) out.at(r, c) = xv.at(r, c) / dv[r];
  bool nx = t.needs_grad(x), nd = t.needs_grad(d);
  int xi = x.id, di = d.id, oi = int(t.size());
  return t.make(std::move(out), nx || nd, [xi, di, oi, nx, nd, R, C](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    const Tensor<S>& y = tt.val(oi);
    const Tensor<S>& dv2 = tt.val(di);
    if (nx) {
      Tensor<S>& gx = tt.grad(xi);
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) gx.at(r, c) += g.at(r, c) / dv2[r];
    }
    if (nd) {
      Tensor<S>& gd = tt.grad(di);
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) gd[r] -= g.at(r, c) * y.at(r, c) / dv2[r];
    }
  });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename S>
Var<S> sum_all(Var<S> x) {
  Tape<S>& t = *x.tape;
  Tensor<S> out = Tensor<S>::scalar(t.val(x).vec().sum());
  int xi = x.id, oi = int(t.size());
  return t.make(std::move(out), t.needs_grad(x), [xi, oi](Tape<S>& tt) {
    tt.grad(xi).vec().array() += tt.grad(oi)[0];
  });
}

template <typename S>
Var<S> mean_all(Var<S> x) {
  Tape<S>& t = *x.tape;
  int64_t n = t.val(x).numel();
  Tensor<S> out = Tensor<S>::scalar(S(t.val(x).vec().sum() / S(n)));
  int xi = x.id, oi = int(t.size());
  return t.make(std::move(out), t.needs_grad(x), [xi, oi, n](Tape<S>& tt) {
    tt.grad(xi).vec().array() += tt.grad(oi)[0] / S(n);
  });
}

// R x C -> R x 1
template <typename S>
Var<S> row_sum(Var<S> x) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = t.val(x);
  if (xv.rank() != 2) throw std::invalid_argument("row_sum: rank-2 required");
  Tensor<S> out({xv.rows(), 1});
  out.vec() = xv.mat().rowwise().sum();
  int xi = x.id, oi = int(t.size());
  return t.make(std::move(out), t.needs_grad(x), [xi, oi](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    Tensor<S>& gx = tt.grad(xi);
    gx.mat().colwise() += ConstVecMap<S>(g.data.data(), g.rows());
  });
}

// R x C -> 1 x C
template <typename S>
Var<S> col_sum(Var<S> x) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = t.val(x);
  if (xv.rank() != 2) throw std::invalid_argument("col_sum: rank-2 required");
  Tensor<S> out({1, xv.cols()});
  out.mat() = xv.mat().colwise().sum();
  int xi = x.id, oi = int(t.size());
  return t.make(std::move(out), t.needs_grad(x), [xi, oi](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    Tensor<S>& gx = tt.grad(xi);
    gx.mat().rowwise() += ConstVecMap<S>(g.data.data(), g.cols()).transpose();
  });
}

// R x C -> 1 x C mean over rows
template <typename S>
Var<S> mean_rows(Var<S> x) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = t.val(x);
  if (xv.rank() != 2) throw std::invalid_argument("mean_rows: rank-2 required");
  int R = xv.rows();
  Tensor<S> out({1, xv.cols()});
  out.mat() = xv.mat().colwise().sum() / S(R);
  int xi = x.id, oi = int(t.size());
  return t.make(std::move(out), t.needs_grad(x), [xi, oi, R](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    Tensor<S>& gx = tt.grad(xi);
    gx.mat().rowwise() += (ConstVecMap<S>(g.data.data(), g.cols()) / S(R)).transpose();
  });
}

// ---------------------------------------------------------------------------
// matrix product
// ---------------------------------------------------------------------------

// C = op(A) * op(B) with optional transposes; everything routes through
// Eigen's GEMM.
template <typename S>
Var<S> matmul(Var<S> a, Var<S> b, bool ta = false, bool tb = false) {
  Tape<S>& t = detail::same_tape(a, b);
  const Tensor<S>& av = t.val(a);
  const Tensor<S>& bv = t.val(b);
  if (av.rank() != 2 || bv.rank() != 2) throw std::invalid_argument("matmul: rank-2 required");
  int am = ta ? av.cols() : av.rows();
  int ak = ta ? av.rows() : av.cols();
  int bk = tb ? bv.cols() : bv.rows();
  int bn = tb ? bv.rows() : bv.cols();
  if (ak != bk)
    throw std::invalid_argument("matmul: inner dimension mismatch " + av.shape_str() + " vs " + bv.shape_str());
  Tensor<S> out({am, bn});
  {
    auto A = av.mat();
    auto B = bv.mat();
    if (!ta && !tb)
      out.mat().noalias() = A * B;
    else if (ta && !tb)
      out.mat().noalias() = A.transpose() * B;
    else if (!ta && tb)
      out.mat().noalias() = A * B.transpose();
    else
      out.mat().noalias() = A.transpose() * B.transpose();
  }
  bool na = t.needs_grad(a), nb = t.needs_grad(b);
  int ai = a.id, bi = b.id, oi = int(t.size());
  return t.make(std::move(out), na || nb, [ai, bi, oi, na, nb, ta, tb](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    auto G = g.mat();
    auto A = tt.val(ai).mat();
    auto B = tt.val(bi).mat();
    if (na) {
      auto GA = tt.grad(ai).mat();
      if (!ta && !tb)
        GA.noalias() += G * B.transpose();
      else if (!ta && tb)
        GA.noalias() += G * B;
      else if (ta && !tb)
        GA.noalias() += B * G.transpose();
      else
        GA.noalias() += B.transpose() * G.transpose();
    }
    if (nb) {
      auto GB = tt.grad(bi).mat();
      if (!tb && !ta)
        GB.noalias() += A.transpose() * G;
      else if (!tb && ta)
        GB.noalias() += A * G;
      else if (tb && !ta)
        GB.noalias() += G.transpose() * A;
      else
        GB.noalias() += G.transpose() * A.transpose();
    }
  });
}

// ---------------------------------------------------------------------------
// softmax / normalization
// ---------------------------------------------------------------------------

// Numerically stabilized softmax along one axis of an arbitrary-rank tensor.
template <typename S>
Var<S> softmax(Var<S> x, int axis) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = t.val(x);
  if (axis < 0 || axis >= xv.rank()) throw std::invalid_argument("softmax: invalid axis");
  int A = xv.shape[size_t(axis)];
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= xv.shape[size_t(i)];
  for (int i = axis + 1; i < xv.rank(); ++i) inner *= xv.shape[size_t(i)];
  Tensor<S> out(xv.shape);
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      int64_t base = o * A * inner + in;
      S mx = xv[base];
      for (int a = 1; a < A; ++a) mx = std::max(mx, xv[base + a * inner]);
      S sum = S(0);
      for (int a = 0; a < A; ++a) {
        S e = std::exp(xv[base + a * inner] - mx);
        out[base + a * inner] = e;
        sum += e;
      }
      for (int a = 0; a < A; ++a) out[base + a * inner] /= sum;
    }
  }
  int xi = x.id, oi = int(t.size());
  return t.make(std::move(out), t.needs_grad(x), [xi, oi, A, outer, inner](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    const Tensor<S>& y = tt.val(oi);
    Tensor<S>& gx = tt.grad(xi);
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t in = 0; in < inner; ++in) {
        int64_t base = o * A * inner + in;
        S dot = S(0);
        for (int a = 0; a < A; ++a) dot += g[base + a * inner] * y[base + a * inner];
        for (int a = 0; a < A; ++a) {
          int64_t k = base + a * inner;
          gx[k] += y[k] * (g[k] - dot);
        }
      }
    }
  });
}

// LayerNorm over the last axis with affine gain/bias.
template <typename S>
Var<S> layer_norm(Var<S> x, Var<S> gain, Var<S> bias, S eps = S(1e-5)) {
  Tape<S>& t = detail::same_tape(x, gain);
  detail::same_tape(x, bias);
  const Tensor<S>& xv = t.val(x);
  const Tensor<S>& gv = t.val(gain);
  const Tensor<S>& bv = t.val(bias);
  int C = xv.shape.back();
  if (gv.numel() != C || bv.numel() != C) throw std::invalid_argument("layer_norm: gain/bias size mismatch");
  int64_t R = xv.numel() / C;
  Tensor<S> out(xv.shape);
  std::vector<S> means(static_cast<size_t>(R));
  std::vector<S> istds(static_cast<size_t>(R));
  for (int64_t r = 0; r < R; ++r) {
    const S* row = xv.data.data() + r * C;
    S mu = S(0);
    for (int c = 0; c < C; ++c) mu += row[c];
    mu /= S(C);
    S var = S(0);
    for (int c = 0; c < C; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= S(C);
    S istd = S(1) / std::sqrt(var + eps);
    means[size_t(r)] = mu;
    istds[size_t(r)] = istd;
    S* orow = out.data.data() + r * C;
    for (int c = 0; c < C; ++c) orow[c] = (row[c] - mu) * istd * gv[c] + bv[c];
  }
  bool nx = t.needs_grad(x), ng = t.needs_grad(gain), nb = t.needs_grad(bias);
  int xi = x.id, gi = gain.id, bi = bias.id, oi = int(t.size());
  return t.make(std::move(out), nx || ng || nb,
                [xi, gi, bi, oi, nx, ng, nb, C, R, means, istds](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    const Tensor<S>& xv2 = tt.val(xi);
    const Tensor<S>& gv2 = tt.val(gi);
    for (int64_t r = 0; r < R; ++r) {
      const S* row = xv2.data.data() + r * C;
      const S* grow = g.data.data() + r * C;
      S mu = means[size_t(r)], istd = istds[size_t(r)];
      if (ng || nb) {
        for (int c = 0; c < C; ++c) {
          if (ng) tt.grad(gi)[c] += grow[c] * (row[c] - mu) * istd;
          if (nb) tt.grad(bi)[c] += grow[c];
        }
      }
      if (nx) {
        S mean_dxhat = S(0), mean_dxhat_xhat = S(0);
        for (int c = 0; c < C; ++c) {
          S xhat = (row[c] - mu) * istd;
          S dxhat = grow[c] * gv2[c];
          mean_dxhat += dxhat;
          mean_dxhat_xhat += dxhat * xhat;
        }
        mean_dxhat /= S(C);
        mean_dxhat_xhat /= S(C);
        S* gxrow = tt.grad(xi).data.data() + r * C;
        for (int c = 0; c < C; ++c) {
          S xhat = (row[c] - mu) * istd;
          S dxhat = grow[c] * gv2[c];
          gxrow[c] += istd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename S>
Var<S> reshape(Var<S> x, std::vector<int> shape) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = t.val(x);
  if (numel_of(shape) != xv.numel()) throw std::invalid_argument("reshape: element count mismatch");
  Tensor<S> out(std::move(shape));
  out.data = xv.data;
  int xi = x.id, oi = int(t.size());
  return t.make(std::move(out), t.needs_grad(x), [xi, oi](Tape<S>& tt) {
    tt.grad(xi).vec() += tt.grad(oi).vec();
  });
}

template <typename S>
Var<S> concat_cols(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape(a, b);
  const Tensor<S>& av = t.val(a);
  const Tensor<S>& bv = t.val(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.rows() != bv.rows())
    throw std::invalid_argument("concat_cols: row mismatch");
  int R = av.rows(), Ca = av.cols(), Cb = bv.cols();
  Tensor<S> out({R, Ca + Cb});
  for (int r = 0; r < R; ++r) {
    std::copy_n(av.data.data() + size_t(r) * Ca, Ca, out.data.data() + size_t(r) * (Ca + Cb));
    std::copy_n(bv.data.data() + size_t(r) * Cb, Cb, out.data.data() + size_t(r) * (Ca + Cb) + Ca);
  }
  bool na = t.needs_grad(a), nb = t.needs_grad(b);
  int ai = a.id, bi = b.id, oi = int(t.size());
  return t.make(std::move(out), na || nb, [ai, bi, oi, na, nb, R, Ca, Cb](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    for (int r = 0; r < R; ++r) {
      const S* grow = g.data.data() + size_t(r) * (Ca + Cb);
      if (na) {
        S* ga = tt.grad(ai).data.data() + size_t(r) * Ca;
        for (int c = 0; c < Ca; ++c) ga[c] += grow[c];
      }
      if (nb) {
        S* gb = tt.grad(bi).data.data() + size_t(r) * Cb;
        for (int c = 0; c < Cb; ++c) gb[c] += grow[Ca + c];
      }
    }
  });
}

template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  Tape<S>& t = *parts[0].tape;
  int C = t.val(parts[0]).cols();
  int R = 0;
  for (auto p : parts) {
    const Tensor<S>& pv = t.val(p);
    if (pv.rank() != 2 || pv.cols() != C) throw std::invalid_argument("concat_rows: column mismatch");
    R += pv.rows();
  }
  Tensor<S> out({R, C});
  std::vector<int> ids, offs;
  std::vector<char> needs;
  bool any = false;
  int off = 0;
  for (auto p : parts) {
    const Tensor<S>& pv = t.val(p);
    std::copy_n(pv.data.data(), pv.numel(), out.data.data() + size_t(off) * C);
    ids.push_back(p.id);
    offs.push_back(off);
    needs.push_back(char(t.needs_grad(p)));
    any = any || t.needs_grad(p);
    off += pv.rows();
  }
  int oi = int(t.size());
  return t.make(std::move(out), any, [ids, offs, needs, oi, C](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    for (size_t k = 0; k < ids.size(); ++k) {
      if (!needs[k]) continue;
      Tensor<S>& gp = tt.grad(ids[k]);
      int64_t n = gp.numel();
      const S* src = g.data.data() + size_t(offs[k]) * C;
      for (int64_t i = 0; i < n; ++i) gp[i] += src[i];
    }
  });
}

template <typename S>
Var<S> transpose2(Var<S> x) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = t.val(x);
  if (xv.rank() != 2) throw std::invalid_argument("transpose2: rank-2 required");
  int R = xv.rows(), C = xv.cols();
  Tensor<S> out({C, R});
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) out.at(c, r) = xv.at(r, c);
  int xi = x.id, oi = int(t.size());
  return t.make(std::move(out), t.needs_grad(x), [xi, oi, R, C](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    Tensor<S>& gx = tt.grad(xi);
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c) gx.at(r, c) += g.at(c, r);
  });
}

// Replicates a 1 x C row n times; gradient is the column-wise sum.
template <typename S>
Var<S> tile_rows(Var<S> x, int n) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = t.val(x);
  if (xv.rank() != 2 || xv.rows() != 1) throw std::invalid_argument("tile_rows: 1 x C expected");
  int C = xv.cols();
  Tensor<S> out({n, C});
  for (int r = 0; r < n; ++r) std::copy_n(xv.data.data(), C, out.data.data() + size_t(r) * C);
  int xi = x.id, oi = int(t.size());
  return t.make(std::move(out), t.needs_grad(x), [xi, oi, n, C](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    Tensor<S>& gx = tt.grad(xi);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < C; ++c) gx[c] += g.data[size_t(r) * C + c];
  });
}

template <typename S>
Var<S> rows_slice(Var<S> x, int r0, int n) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = t.val(x);
  if (xv.rank() != 2 || r0 < 0 || r0 + n > xv.rows()) throw std::invalid_argument("rows_slice: out of range");
  int C = xv.cols();
  Tensor<S> out({n, C});
  std::copy_n(xv.data.data() + size_t(r0) * C, size_t(n) * C, out.data.data());
  int xi = x.id, oi = int(t.size());
  return t.make(std::move(out), t.needs_grad(x), [xi, oi, r0, n, C](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    Tensor<S>& gx = tt.grad(xi);
    S* dst = gx.data.data() + size_t(r0) * C;
    for (int64_t i = 0; i < int64_t(n) * C; ++i) dst[i] += g[i];
  });
}

template <typename S>
Var<S> row(Var<S> x, int j) {
  return rows_slice(x, j, 1);
}

template <typename S>
Var<S> col_block(Var<S> x, int c0, int n) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = t.val(x);
  if (xv.rank() != 2 || c0 < 0 || c0 + n > xv.cols()) throw std::invalid_argument("col_block: out of range");
  int R = xv.rows(), C = xv.cols();
  Tensor<S> out({R, n});
  for (int r = 0; r < R; ++r)
    std::copy_n(xv.data.data() + size_t(r) * C + c0, n, out.data.data() + size_t(r) * n);
  int xi = x.id, oi = int(t.size());
  return t.make(std::move(out), t.needs_grad(x), [xi, oi, c0, n, R, C](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    Tensor<S>& gx = tt.grad(xi);
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < n; ++c) gx.data[size_t(r) * C + c0 + c] += g.data[size_t(r) * n + c];
  });
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

template <typename S>
Var<S> mse_loss(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape(a, b);
  const Tensor<S>& av = t.val(a);
  const Tensor<S>& bv = t.val(b);
  if (!av.same_shape(bv)) throw std::invalid_argument("mse_loss: shape mismatch");
  int64_t n = av.numel();
  S acc = S(0);
  for (int64_t i = 0; i < n; ++i) {
    S d = av[i] - bv[i];
    acc += d * d;
  }
  Tensor<S> out = Tensor<S>::scalar(acc / S(n));
  bool na = t.needs_grad(a), nb = t.needs_grad(b);
  int ai = a.id, bi = b.id, oi = int(t.size());
  return t.make(std::move(out), na || nb, [ai, bi, oi, na, nb, n](Tape<S>& tt) {
    S g0 = tt.grad(oi)[0] * S(2) / S(n);
    const Tensor<S>& av2 = tt.val(ai);
    const Tensor<S>& bv2 = tt.val(bi);
    if (na) {
      Tensor<S>& ga = tt.grad(ai);
      for (int64_t i = 0; i < n; ++i) ga[i] += g0 * (av2[i] - bv2[i]);
    }
    if (nb) {
      Tensor<S>& gb = tt.grad(bi);
      for (int64_t i = 0; i < n; ++i) gb[i] -= g0 * (av2[i] - bv2[i]);
    }
  });
}

// Mean binary cross-entropy; predictions clamped away from {0,1}. Gradients
// flow to both arguments unless one is detached by the caller.
template <typename S>
Var<S> bce_loss(Var<S> target, Var<S> pred, S clamp_eps = S(1e-7)) {
  Tape<S>& t = detail::same_tape(target, pred);
  const Tensor<S>& tv = t.val(target);
  const Tensor<S>& pv = t.val(pred);
  if (!tv.same_shape(pv)) throw std::invalid_argument("bce_loss: shape mismatch");
  int64_t n = tv.numel();
  S acc = S(0);
  for (int64_t i = 0; i < n; ++i) {
    S p = std::min(S(1) - clamp_eps, std::max(clamp_eps, pv[i]));
    acc -= tv[i] * std::log(p) + (S(1) - tv[i]) * std::log(S(1) - p);
  }
  Tensor<S> out = Tensor<S>::scalar(acc / S(n));
  bool nt = t.needs_grad(target), np = t.needs_grad(pred);
  int ti = target.id, pi = pred.id, oi = int(t.size());
  return t.make(std::move(out), nt || np, [ti, pi, oi, nt, np, n, clamp_eps](Tape<S>& tt) {
    S g0 = tt.grad(oi)[0] / S(n);
    const Tensor<S>& tv2 = tt.val(ti);
    const Tensor<S>& pv2 = tt.val(pi);
    for (int64_t i = 0; i < n; ++i) {
      S p = std::min(S(1) - clamp_eps, std::max(clamp_eps, pv2[i]));
      if (np && pv2[i] > clamp_eps && pv2[i] < S(1) - clamp_eps)
        tt.grad(pi)[i] += g0 * (p - tv2[i]) / (p * (S(1) - p));
      if (nt) tt.grad(ti)[i] += g0 * (std::log(S(1) - p) - std::log(p));
    }
  });
}

// ---------------------------------------------------------------------------
// misc helpers
// ---------------------------------------------------------------------------

template <typename S>
S scalar_value(Var<S> x) {
  const Tensor<S>& v = x.tape->val(x);
  if (v.numel() != 1) throw std::invalid_argument("scalar_value: not a scalar");
  return v[0];
}

}  // namespace slotdiff

#pragma once

#include "slotdiff/ops.hpp"

// Spatial ops on [N, C, H, W] tensors: im2col convolution, group
// normalization, nearest upsampling, token views for attention, and the
// bilinear row resize used to align attention maps across resolutions.

namespace slotdiff {

namespace detail {

// col is (Ci*kh*kw) x (Ho*Wo) for one sample.
template <typename S>
void im2col(const S* x, int Ci, int H, int W, int kh, int kw, int stride, int pad, int Ho, int Wo,
            S* col) {
  for (int ci = 0; ci < Ci; ++ci) {
    const S* xc = x + size_t(ci) * H * W;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        S* crow = col + size_t((ci * kh + ki) * kw + kj) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          int iy = oy * stride + ki - pad;
          S* cdst = crow + size_t(oy) * Wo;
          if (iy < 0 || iy >= H) {
            std::fill_n(cdst, Wo, S(0));
            continue;
          }
          const S* xrow = xc + size_t(iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            int ix = ox * stride + kj - pad;
            cdst[ox] = (ix >= 0 && ix < W) ? xrow[ix] : S(0);
          }
        }
      }
    }
  }
}

template <typename S>
void col2im_add(const S* col, int Ci, int H, int W, int kh, int kw, int stride, int pad, int Ho,
                int Wo, S* dx) {
  for (int ci = 0; ci < Ci; ++ci) {
    S* dxc = dx + size_t(ci) * H * W;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const S* crow = col + size_t((ci * kh + ki) * kw + kj) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          int iy = oy * stride + ki - pad;
          if (iy < 0 || iy >= H) continue;
          const S* csrc = crow + size_t(oy) * Wo;
          S* dxrow = dxc + size_t(iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            int ix = ox * stride + kj - pad;
            if (ix >= 0 && ix < W) dxrow[ix] += csrc[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// 2-d convolution, x [N,Ci,H,W], w [Co,Ci,kh,kw], optional bias [Co].
template <typename S>
Var<S> conv2d(Var<S> x, Var<S> w, Var<S> b, int stride = 1, int pad = 1) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = t.val(x);
  const Tensor<S>& wv = t.val(w);
  if (xv.rank() != 4 || wv.rank() != 4) throw std::invalid_argument("conv2d: rank-4 required");
  int N = xv.shape[0], Ci = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
  int Co = wv.shape[0], kh = wv.shape[2], kw = wv.shape[3];
  if (wv.shape[1] != Ci) throw std::invalid_argument("conv2d: channel mismatch");
  int Ho = (H + 2 * pad - kh) / stride + 1;
  int Wo = (W + 2 * pad - kw) / stride + 1;
  if (Ho <= 0 || Wo <= 0) throw std::invalid_argument("conv2d: empty output");
  bool has_bias = b.valid();
  const S* bias = has_bias ? t.val(b).data.data() : nullptr;
  if (has_bias && t.val(b).numel() != Co) throw std::invalid_argument("conv2d: bias size mismatch");

  int K = Ci * kh * kw;
  Tensor<S> out({N, Co, Ho, Wo});
  std::vector<S> col(size_t(K) * Ho * Wo);
  auto Wmat = wv.mat_as(Co, K);
  for (int n = 0; n < N; ++n) {
    detail::im2col(xv.data.data() + size_t(n) * Ci * H * W, Ci, H, W, kh, kw, stride, pad, Ho, Wo,
                   col.data());
    ConstMatMap<S> C(col.data(), K, Ho * Wo);
    MatMap<S> Y(out.data.data() + size_t(n) * Co * Ho * Wo, Co, Ho * Wo);
    Y.noalias() = Wmat * C;
    if (has_bias)
      for (int co = 0; co < Co; ++co) Y.row(co).array() += bias[co];
  }
  bool nx = t.needs_grad(x), nw = t.needs_grad(w), nb = has_bias && t.needs_grad(b);
  int xi = x.id, wi = w.id, bi = has_bias ? b.id : -1, oi = int(t.size());
  return t.make(std::move(out), nx || nw || nb,
                [=](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    const Tensor<S>& xv2 = tt.val(xi);
    const Tensor<S>& wv2 = tt.val(wi);
    auto Wm = wv2.mat_as(Co, K);
    std::vector<S> col2(size_t(K) * Ho * Wo);
    std::vector<S> dcol(size_t(K) * Ho * Wo);
    for (int n = 0; n < N; ++n) {
      ConstMatMap<S> G(g.data.data() + size_t(n) * Co * Ho * Wo, Co, Ho * Wo);
      if (nw || nx) {
        if (nw) {
          detail::im2col(xv2.data.data() + size_t(n) * Ci * H * W, Ci, H, W, kh, kw, stride, pad,
                         Ho, Wo, col2.data());
          ConstMatMap<S> C(col2.data(), K, Ho * Wo);
          tt.grad(wi).mat_as(Co, K).noalias() += G * C.transpose();
        }
        if (nx) {
          MatMap<S> DC(dcol.data(), K, Ho * Wo);
          DC.noalias() = Wm.transpose() * G;
          detail::col2im_add(dcol.data(), Ci, H, W, kh, kw, stride, pad, Ho, Wo,
                             tt.grad(xi).data.data() + size_t(n) * Ci * H * W);
        }
      }
      if (nb) {
        Tensor<S>& gb = tt.grad(bi);
        for (int co = 0; co < Co; ++co) gb[co] += G.row(co).sum();
      }
    }
  });
}

// GroupNorm over [N,C,H,W]; stats per (sample, group), affine per channel.
template <typename S>
Var<S> group_norm(Var<S> x, int groups, Var<S> gain, Var<S> bias, S eps = S(1e-5)) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = t.val(x);
  if (xv.rank() != 4) throw std::invalid_argument("group_norm: rank-4 required");
  int N = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
  if (C % groups != 0) throw std::invalid_argument("group_norm: channels not divisible by groups");
  const Tensor<S>& gv = t.val(gain);
  const Tensor<S>& bv = t.val(bias);
  if (gv.numel() != C || bv.numel() != C) throw std::invalid_argument("group_norm: affine size mismatch");
  int Cg = C / groups;
  int64_t m = int64_t(Cg) * H * W;
  Tensor<S> out(xv.shape);
  std::vector<S> means(size_t(N) * groups), istds(size_t(N) * groups);
  for (int n = 0; n < N; ++n) {
    for (int gidx = 0; gidx < groups; ++gidx) {
      const S* xs = xv.data.data() + (size_t(n) * C + size_t(gidx) * Cg) * H * W;
      S mu = 0;
      for (int64_t i = 0; i < m; ++i) mu += xs[i];
      mu /= S(m);
      S var = 0;
      for (int64_t i = 0; i < m; ++i) var += (xs[i] - mu) * (xs[i] - mu);
      var /= S(m);
      S istd = S(1) / std::sqrt(var + eps);
      means[size_t(n) * groups + gidx] = mu;
      istds[size_t(n) * groups + gidx] = istd;
      S* os = out.data.data() + (size_t(n) * C + size_t(gidx) * Cg) * H * W;
      for (int cc = 0; cc < Cg; ++cc) {
        int c = gidx * Cg + cc;
        const S* xc = xs + size_t(cc) * H * W;
        S* oc = os + size_t(cc) * H * W;
        for (int64_t i = 0; i < int64_t(H) * W; ++i) oc[i] = (xc[i] - mu) * istd * gv[c] + bv[c];
      }
    }
  }
  bool nx = t.needs_grad(x), ng = t.needs_grad(gain), nb = t.needs_grad(bias);
  int xi = x.id, gi = gain.id, bi = bias.id, oi = int(t.size());
  return t.make(std::move(out), nx || ng || nb, [=](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    const Tensor<S>& xv2 = tt.val(xi);
    const Tensor<S>& gv2 = tt.val(gi);
    int64_t hw = int64_t(H) * W;
    for (int n = 0; n < N; ++n) {
      for (int gidx = 0; gidx < groups; ++gidx) {
        S mu = means[size_t(n) * groups + gidx];
        S istd = istds[size_t(n) * groups + gidx];
        const S* xs = xv2.data.data() + (size_t(n) * C + size_t(gidx) * Cg) * H * W;
        const S* gs = g.data.data() + (size_t(n) * C + size_t(gidx) * Cg) * H * W;
        if (ng || nb) {
          for (int cc = 0; cc < Cg; ++cc) {
            int c = gidx * Cg + cc;
            const S* xc = xs + size_t(cc) * hw;
            const S* gc = gs + size_t(cc) * hw;
            S sg = 0, sgx = 0;
            for (int64_t i = 0; i < hw; ++i) {
              sg += gc[i];
              sgx += gc[i] * (xc[i] - mu) * istd;
            }
            if (ng) tt.grad(gi)[c] += sgx;
            if (nb) tt.grad(bi)[c] += sg;
          }
        }
        if (nx) {
          S mean_dxhat = 0, mean_dxhat_xhat = 0;
          for (int cc = 0; cc < Cg; ++cc) {
            int c = gidx * Cg + cc;
            const S* xc = xs + size_t(cc) * hw;
            const S* gc = gs + size_t(cc) * hw;
            for (int64_t i = 0; i < hw; ++i) {
              S xhat = (xc[i] - mu) * istd;
              S dxhat = gc[i] * gv2[c];
              mean_dxhat += dxhat;
              mean_dxhat_xhat += dxhat * xhat;
            }
          }
          mean_dxhat /= S(m);
          mean_dxhat_xhat /= S(m);
          S* dxs = tt.grad(xi).data.data() + (size_t(n) * C + size_t(gidx) * Cg) * H * W;
          for (int cc = 0; cc < Cg; ++cc) {
            int c = gidx * Cg + cc;
            const S* xc = xs + size_t(cc) * hw;
            const S* gc = gs + size_t(cc) * hw;
            S* dxc = dxs + size_t(cc) * hw;
            for (int64_t i = 0; i < hw; ++i) {
              S xhat = (xc[i] - mu) * istd;
              S dxhat = gc[i] * gv2[c];
              dxc[i] += istd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
            }
          }
        }
      }
    }
  });
}

template <typename S>
Var<S> upsample_nearest2x(Var<S> x) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = t.val(x);
  if (xv.rank() != 4) throw std::invalid_argument("upsample_nearest2x: rank-4 required");
  int N = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
  Tensor<S> out({N, C, 2 * H, 2 * W});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const S* src = xv.data.data() + (size_t(n) * C + c) * H * W;
      S* dst = out.data.data() + (size_t(n) * C + c) * 4 * H * W;
      for (int y = 0; y < 2 * H; ++y) {
        const S* srow = src + size_t(y / 2) * W;
        S* drow = dst + size_t(y) * 2 * W;
        for (int xp = 0; xp < 2 * W; ++xp) drow[xp] = srow[xp / 2];
      }
    }
  int xi = x.id, oi = int(t.size());
  return t.make(std::move(out), t.needs_grad(x), [xi, oi, N, C, H, W](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    Tensor<S>& gx = tt.grad(xi);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        S* dst = gx.data.data() + (size_t(n) * C + c) * H * W;
        const S* src = g.data.data() + (size_t(n) * C + c) * 4 * H * W;
        for (int y = 0; y < 2 * H; ++y) {
          const S* srow = src + size_t(y) * 2 * W;
          S* drow = dst + size_t(y / 2) * W;
          for (int xp = 0; xp < 2 * W; ++xp) drow[xp / 2] += srow[xp];
        }
      }
  });
}

// [N,C,H,W] -> [(N*H*W), C] token matrix (per-sample blocks of H*W rows).
template <typename S>
Var<S> to_tokens(Var<S> x) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = t.val(x);
  if (xv.rank() != 4) throw std::invalid_argument("to_tokens: rank-4 required");
  int N = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
  int64_t hw = int64_t(H) * W;
  Tensor<S> out({int(N * hw), C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const S* src = xv.data.data() + (size_t(n) * C + c) * hw;
      for (int64_t p = 0; p < hw; ++p) out.data[(size_t(n) * hw + p) * C + c] = src[p];
    }
  int xi = x.id, oi = int(t.size());
  return t.make(std::move(out), t.needs_grad(x), [xi, oi, N, C, hw](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    Tensor<S>& gx = tt.grad(xi);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        S* dst = gx.data.data() + (size_t(n) * C + c) * hw;
        for (int64_t p = 0; p < hw; ++p) dst[p] += g.data[(size_t(n) * hw + p) * C + c];
      }
  });
}

template <typename S>
Var<S> from_tokens(Var<S> x, int N, int C, int H, int W) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = t.val(x);
  int64_t hw = int64_t(H) * W;
  if (xv.rank() != 2 || xv.rows() != N * hw || xv.cols() != C)
    throw std::invalid_argument("from_tokens: shape mismatch");
  Tensor<S> out({N, C, H, W});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      S* dst = out.data.data() + (size_t(n) * C + c) * hw;
      for (int64_t p = 0; p < hw; ++p) dst[p] = xv.data[(size_t(n) * hw + p) * C + c];
    }
  int xi = x.id, oi = int(t.size());
  return t.make(std::move(out), t.needs_grad(x), [xi, oi, N, C, hw](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    Tensor<S>& gx = tt.grad(xi);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const S* src = g.data.data() + (size_t(n) * C + c) * hw;
        for (int64_t p = 0; p < hw; ++p) gx.data[(size_t(n) * hw + p) * C + c] += src[p];
      }
  });
}

// x [N,C,H,W] + e [N,C] broadcast over the spatial axes.
template <typename S>
Var<S> add_chan_bias(Var<S> x, Var<S> e) {
  Tape<S>& t = detail::same_tape(x, e);
  const Tensor<S>& xv = t.val(x);
  const Tensor<S>& ev = t.val(e);
  if (xv.rank() != 4 || ev.rank() != 2 || ev.rows() != xv.shape[0] || ev.cols() != xv.shape[1])
    throw std::invalid_argument("add_chan_bias: shape mismatch");
  int N = xv.shape[0], C = xv.shape[1];
  int64_t hw = int64_t(xv.shape[2]) * xv.shape[3];
  Tensor<S> out(xv.shape);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const S* src = xv.data.data() + (size_t(n) * C + c) * hw;
      S* dst = out.data.data() + (size_t(n) * C + c) * hw;
      S add = ev.at(n, c);
      for (int64_t i = 0; i < hw; ++i) dst[i] = src[i] + add;
    }
  bool nx = t.needs_grad(x), ne = t.needs_grad(e);
  int xi = x.id, ei = e.id, oi = int(t.size());
  return t.make(std::move(out), nx || ne, [xi, ei, oi, nx, ne, N, C, hw](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    if (nx) tt.grad(xi).vec() += g.vec();
    if (ne) {
      Tensor<S>& ge = tt.grad(ei);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const S* src = g.data.data() + (size_t(n) * C + c) * hw;
          S acc = 0;
          for (int64_t i = 0; i < hw; ++i) acc += src[i];
          ge.at(n, c) += acc;
        }
    }
  });
}

// Rows of x are h1 x w1 rasters; each is bilinearly resampled to h2 x w2
// over normalized pixel centers. Linear map, so the backward pass reuses the
// same interpolation weights transposed.
template <typename S>
Var<S> bilinear_resize_rows(Var<S> x, int h1, int w1, int h2, int w2) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = t.val(x);
  if (xv.rank() != 2 || xv.cols() != h1 * w1) throw std::invalid_argument("bilinear_resize_rows: bad input");
  int K = xv.rows();
  struct Tap {
    int src;
    S w;
  };
  auto axis_taps = [](int n1, int n2, int o) {
    double f = (double(o) + 0.5) * n1 / n2 - 0.5;
    f = std::max(0.0, std::min(double(n1 - 1), f));
    int i0 = int(std::floor(f));
    int i1 = std::min(i0 + 1, n1 - 1);
    double fr = f - i0;
    return std::tuple<int, int, double>(i0, i1, fr);
  };
  std::vector<std::vector<Tap>> taps(size_t(h2) * w2);
  for (int oy = 0; oy < h2; ++oy) {
    auto [y0, y1, fy] = axis_taps(h1, h2, oy);
    for (int ox = 0; ox < w2; ++ox) {
      auto [x0, x1, fx] = axis_taps(w1, w2, ox);
      auto& tp = taps[size_t(oy) * w2 + ox];
      tp.push_back({y0 * w1 + x0, S((1 - fy) * (1 - fx))});
      if (x1 != x0) tp.push_back({y0 * w1 + x1, S((1 - fy) * fx)});
      if (y1 != y0) tp.push_back({y1 * w1 + x0, S(fy * (1 - fx))});
      if (y1 != y0 && x1 != x0) tp.push_back({y1 * w1 + x1, S(fy * fx)});
    }
  }
  Tensor<S> out({K, h2 * w2});
  for (int k = 0; k < K; ++k) {
    const S* src = xv.data.data() + size_t(k) * h1 * w1;
    S* dst = out.data.data() + size_t(k) * h2 * w2;
    for (size_t o = 0; o < taps.size(); ++o) {
      S acc = 0;
      for (const Tap& tp : taps[o]) acc += tp.w * src[tp.src];
      dst[o] = acc;
    }
  }
  int xi = x.id, oi = int(t.size());
  return t.make(std::move(out), t.needs_grad(x), [xi, oi, K, h1, w1, h2, w2, taps](Tape<S>& tt) {
    const Tensor<S>& g = tt.grad(oi);
    Tensor<S>& gx = tt.grad(xi);
    for (int k = 0; k < K; ++k) {
      const S* src = g.data.data() + size_t(k) * h2 * w2;
      S* dst = gx.data.data() + size_t(k) * h1 * w1;
      for (size_t o = 0; o < taps.size(); ++o)
        for (const Tap& tp : taps[o]) dst[tp.src] += tp.w * src[o];
    }
  });
}

}  // namespace slotdiff

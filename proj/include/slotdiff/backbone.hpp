#pragma once

#include "slotdiff/nn.hpp"
#include "slotdiff/ops_conv.hpp"

namespace slotdiff {

template <typename S>
struct Conv2dM {
  Parameter<S> w, b;
  int stride = 1, pad = 1;

  void init(int ci, int co, int k, int stride_, int pad_, Rng& rng, ParamSet<S>& ps,
            const std::string& name) {
    stride = stride_;
    pad = pad_;
    init_xavier(w, {co, ci, k, k}, ci * k * k, co * k * k, rng);
    init_zeros(b, {co});
    ps.add(w, name + ".w");
    ps.add(b, name + ".b");
  }

  Var<S> operator()(Tape<S>& t, Var<S> x) const {
    auto& m = const_cast<Conv2dM&>(*this);
    return conv2d(x, t.leaf(m.w), t.leaf(m.b), stride, pad);
  }
};

// Normalized patch-center grid, row-major raster, (x, y) columns in [-1,1].
template <typename S>
Tensor<S> patch_grid(int h, int w) {
  Tensor<S> g({h * w, 2});
  for (int py = 0; py < h; ++py)
    for (int px = 0; px < w; ++px) {
      g.at(py * w + px, 0) = S((2.0 * px + 1.0) / w - 1.0);
      g.at(py * w + px, 1) = S((2.0 * py + 1.0) / h - 1.0);
    }
  return g;
}

// Small trainable conv feature extractor, patch stride 4 (strides 2,2,1),
// with an additive learned per-patch position embedding.
template <typename S>
struct Backbone {
  int d = 64;
  int grid_h = 0, grid_w = 0;
  Conv2dM<S> c1, c2, c3;
  Parameter<S> pos_embed;  // N x d

  void init(int feature_dim, int img_h, int img_w, Rng& rng, ParamSet<S>& ps,
            const std::string& name) {
    if (img_h % 4 != 0 || img_w % 4 != 0)
      throw std::invalid_argument("backbone: image size must be divisible by the patch stride 4");
    d = feature_dim;
    grid_h = img_h / 4;
    grid_w = img_w / 4;
    c1.init(3, d, 3, 2, 1, rng, ps, name + ".c1");
    c2.init(d, d, 3, 2, 1, rng, ps, name + ".c2");
    c3.init(d, d, 3, 1, 1, rng, ps, name + ".c3");
    init_normal(pos_embed, {grid_h * grid_w, d}, rng, 0.02);
    ps.add(pos_embed, name + ".pos_embed");
  }

  int patches() const { return grid_h * grid_w; }

  // images [B,3,H,W] -> tokens [(B*N) x d]; per-sample blocks of N rows.
  Var<S> operator()(Tape<S>& t, Var<S> images) const {
    auto& m = const_cast<Backbone&>(*this);
    const Tensor<S>& xv = t.val(images);
    if (xv.rank() != 4 || xv.shape[2] / 4 != grid_h || xv.shape[3] / 4 != grid_w)
      throw std::invalid_argument("backbone: image shape mismatch");
    int B = xv.shape[0];
    Var<S> f = relu(c1(t, images));
    f = relu(c2(t, f));
    f = c3(t, f);
    Var<S> tok = to_tokens(f);  // (B*N) x d
    Var<S> pe = t.leaf(m.pos_embed);
    if (B == 1) return add(tok, pe);
    std::vector<Var<S>> parts;
    for (int b = 0; b < B; ++b) parts.push_back(pe);
    return add(tok, concat_rows(parts));
  }

  Tensor<S> abs_grid() const { return patch_grid<S>(grid_h, grid_w); }
};

}  // namespace slotdiff

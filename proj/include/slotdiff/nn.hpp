#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "slotdiff/ops.hpp"
#include "slotdiff/rng.hpp"

namespace slotdiff {

// Registry of named parameters. Modules register their Parameters here so
// the optimizer and checkpoint code can walk the model uniformly.
template <typename S>
class ParamSet {
 public:
  Parameter<S>& add(Parameter<S>& p, const std::string& name) {
    p.name = name;
    items_.push_back(&p);
    return p;
  }
  const std::vector<Parameter<S>*>& items() const { return items_; }
  std::vector<Parameter<S>*>& items() { return items_; }
  Parameter<S>* find(const std::string& name) {
    for (auto* p : items_)
      if (p->name == name) return p;
    return nullptr;
  }
  void zero_grads() {
    for (auto* p : items_) p->zero_grad();
  }
  int64_t count() const {
    int64_t n = 0;
    for (auto* p : items_) n += p->value.numel();
    return n;
  }

 private:
  std::vector<Parameter<S>*> items_;
};

template <typename S>
void init_xavier(Parameter<S>& p, std::vector<int> shape, int fan_in, int fan_out, Rng& rng) {
  Tensor<S> v(std::move(shape));
  double a = std::sqrt(6.0 / double(fan_in + fan_out));
  for (auto& x : v.data) x = S(rng.uniform(-a, a));
  p.set(std::move(v));
}

template <typename S>
void init_zeros(Parameter<S>& p, std::vector<int> shape) {
  p.set(Tensor<S>(std::move(shape)));
}

template <typename S>
void init_const(Parameter<S>& p, std::vector<int> shape, S c) {
  p.set(Tensor<S>::full(std::move(shape), c));
}

template <typename S>
void init_normal(Parameter<S>& p, std::vector<int> shape, Rng& rng, double stddev) {
  p.set(Tensor<S>::randn(std::move(shape), rng, stddev));
}

// ---------------------------------------------------------------------------

template <typename S>
struct Linear {
  Parameter<S> w;  // in x out
  Parameter<S> b;  // out
  bool has_bias = true;

  void init(int in, int out, Rng& rng, ParamSet<S>& ps, const std::string& name, bool bias = true,
            bool zero_weight = false) {
    has_bias = bias;
    if (zero_weight)
      init_zeros(w, {in, out});
    else
      init_xavier(w, {in, out}, in, out, rng);
    ps.add(w, name + ".w");
    if (bias) {
      init_zeros(b, {out});
      ps.add(b, name + ".b");
    }
  }

  Var<S> operator()(Tape<S>& t, Var<S> x) const {
    Var<S> y = matmul(x, t.leaf(const_cast<Parameter<S>&>(w)));
    if (has_bias) y = add_rowvec(y, t.leaf(const_cast<Parameter<S>&>(b)));
    return y;
  }
};

// y = x . W (+ b); the shared projection primitive.
template <typename S>
Var<S> linear(Var<S> x, Var<S> w, Var<S> b = Var<S>{}) {
  Var<S> y = matmul(x, w);
  if (b.valid()) y = add_rowvec(y, b);
  return y;
}

template <typename S>
struct LayerNormModule {
  Parameter<S> gain, bias;
  S eps = S(1e-5);

  void init(int dim, ParamSet<S>& ps, const std::string& name) {
    init_const(gain, {dim}, S(1));
    init_zeros(bias, {dim});
    ps.add(gain, name + ".gain");
    ps.add(bias, name + ".bias");
  }

  Var<S> operator()(Tape<S>& t, Var<S> x) const {
    return layer_norm(x, t.leaf(const_cast<Parameter<S>&>(gain)),
                      t.leaf(const_cast<Parameter<S>&>(bias)), eps);
  }
};

// ---------------------------------------------------------------------------
// GRU cell, convention:
//   z    = sigmoid(W_z . [u, h] + b_z)
//   r    = sigmoid(W_r . [u, h] + b_r)
//   hcan = tanh  (W_h . [u, r*h] + b_h)
//   h'   = (1 - z) * h + z * hcan
// ---------------------------------------------------------------------------

template <typename S>
struct GruCell {
  int input_size = 0, hidden_size = 0;
  Parameter<S> wz, bz, wr, br, wh, bh;  // each W is (in+hidden) x hidden

  void init(int in, int hidden, Rng& rng, ParamSet<S>& ps, const std::string& name) {
    input_size = in;
    hidden_size = hidden;
    int rows = in + hidden;
    init_xavier(wz, {rows, hidden}, rows, hidden, rng);
    init_zeros(bz, {hidden});
    init_xavier(wr, {rows, hidden}, rows, hidden, rng);
    init_zeros(br, {hidden});
    init_xavier(wh, {rows, hidden}, rows, hidden, rng);
    init_zeros(bh, {hidden});
    ps.add(wz, name + ".wz");
    ps.add(bz, name + ".bz");
    ps.add(wr, name + ".wr");
    ps.add(br, name + ".br");
    ps.add(wh, name + ".wh");
    ps.add(bh, name + ".bh");
  }
};

// One GRU update applied row-wise: h and u are (rows x hidden/in).
template <typename S>
Var<S> gru_step(Tape<S>& t, const GruCell<S>& cell, Var<S> h, Var<S> u) {
  const Tensor<S>& hv = t.val(h);
  const Tensor<S>& uv = t.val(u);
  if (hv.cols() != cell.hidden_size || uv.cols() != cell.input_size || hv.rows() != uv.rows())
    throw std::invalid_argument("gru_step: size mismatch");
  auto& c = const_cast<GruCell<S>&>(cell);
  Var<S> uh = concat_cols(u, h);
  Var<S> z = sigmoid_v(linear(uh, t.leaf(c.wz), t.leaf(c.bz)));
  Var<S> r = sigmoid_v(linear(uh, t.leaf(c.wr), t.leaf(c.br)));
  Var<S> urh = concat_cols(u, mul(r, h));
  Var<S> hcan = tanh_v(linear(urh, t.leaf(c.wh), t.leaf(c.bh)));
  Var<S> one_minus_z = add_const(neg(z), S(1));
  return add(mul(one_minus_z, h), mul(z, hcan));
}

// ---------------------------------------------------------------------------
// Multi-head cross-attention. Queries come from `q_src` (M x Dq), context
// supplies keys/values (C x Dc). Returns the projected output and the
// head-averaged attention map (M x C), rows summing to 1.
// ---------------------------------------------------------------------------

template <typename S>
struct AttentionOut {
  Var<S> out;        // M x Dq
  Var<S> attn_mean;  // M x C, head-averaged
};

template <typename S>
struct CrossAttention {
  int heads = 1, dim = 0;  // dim = total key/query width
  Linear<S> wq, wk, wv, wo;

  void init(int d_query, int d_ctx, int d_attn, int n_heads, Rng& rng, ParamSet<S>& ps,
            const std::string& name, bool zero_out_proj = false) {
    heads = n_heads;
    dim = d_attn;
    if (d_attn % n_heads != 0) throw std::invalid_argument("cross_attention: dim % heads != 0");
    wq.init(d_query, d_attn, rng, ps, name + ".wq", false);
    wk.init(d_ctx, d_attn, rng, ps, name + ".wk", false);
    wv.init(d_ctx, d_attn, rng, ps, name + ".wv", false);
    wo.init(d_attn, d_query, rng, ps, name + ".wo", true, zero_out_proj);
  }

  // key_mask: optional per-context-row flags; masked rows are excluded from
  // attention (their logits drop to -1e9 before the softmax).
  AttentionOut<S> operator()(Tape<S>& t, Var<S> q_src, Var<S> context,
                             const std::vector<char>* key_mask = nullptr) const {
    int C = t.val(context).rows();  // copied out before ops can grow the tape
    if (C < 1) throw std::invalid_argument("cross_attention: empty context");
    int dh = dim / heads;
    Var<S> q = wq(t, q_src);
    Var<S> k = wk(t, context);
    Var<S> v = wv(t, context);
    S inv_sqrt = S(1.0 / std::sqrt(double(dh)));
    Var<S> mask_row;
    if (key_mask != nullptr) {
      if (int(key_mask->size()) != C)
        throw std::invalid_argument("cross_attention: key mask size mismatch");
      Tensor<S> m({1, C});
      for (int i = 0; i < C; ++i) m[i] = (*key_mask)[size_t(i)] ? S(0) : S(-1e9);
      mask_row = t.input(std::move(m));
    }
    Var<S> merged;    // M x dim
    Var<S> attn_sum;  // M x C
    for (int h = 0; h < heads; ++h) {
      Var<S> qh = col_block(q, h * dh, dh);
      Var<S> kh = col_block(k, h * dh, dh);
      Var<S> vh = col_block(v, h * dh, dh);
      Var<S> logits = scale(matmul(qh, kh, false, true), inv_sqrt);
      if (mask_row.valid()) logits = add_rowvec(logits, mask_row);
      Var<S> attn = softmax(logits, 1);
      Var<S> oh = matmul(attn, vh);
      merged = (h == 0) ? oh : concat_cols(merged, oh);
      attn_sum = (h == 0) ? attn : add(attn_sum, attn);
    }
    return {wo(t, merged), scale(attn_sum, S(1.0 / heads))};
  }
};

// Spec-level free function: cross-attention with fresh projections is a
// module concern; this wrapper exists for call sites holding a module.
template <typename S>
AttentionOut<S> cross_attention(Tape<S>& t, const CrossAttention<S>& m, Var<S> queries_src,
                                Var<S> context) {
  return m(t, queries_src, context);
}

// ---------------------------------------------------------------------------
// Two-layer MLP with an activation in between.
// ---------------------------------------------------------------------------

template <typename S>
struct Mlp {
  Linear<S> fc1, fc2;

  void init(int in, int hidden, int out, Rng& rng, ParamSet<S>& ps, const std::string& name) {
    fc1.init(in, hidden, rng, ps, name + ".fc1");
    fc2.init(hidden, out, rng, ps, name + ".fc2");
  }

  Var<S> operator()(Tape<S>& t, Var<S> x) const { return fc2(t, relu(fc1(t, x))); }
};

}  // namespace slotdiff

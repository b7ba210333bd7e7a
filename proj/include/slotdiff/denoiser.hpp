#pragma once

#include "slotdiff/backbone.hpp"
#include "slotdiff/conditioning.hpp"
#include "slotdiff/schedule.hpp"

// Slot-conditioned mini U-Net noise predictor. Two down blocks, one mid
// block, two up blocks; every block carries a conv-residual unit, a BASE
// cross-attention whose context is the register token, and (configurably,
// default all but mid) an ADAPTER cross-attention whose context is the slot
// set. Adapter output projections start at zero so an untrained adapter is
// a no-op on the frozen-path activations.

namespace slotdiff {

template <typename S>
struct GroupNormM {
  Parameter<S> gain, bias;
  int groups = 8;

  void init(int channels, ParamSet<S>& ps, const std::string& name) {
    groups = channels % 8 == 0 ? 8 : 1;
    init_const(gain, {channels}, S(1));
    init_zeros(bias, {channels});
    ps.add(gain, name + ".gain");
    ps.add(bias, name + ".bias");
  }

  Var<S> operator()(Tape<S>& t, Var<S> x) const {
    auto& m = const_cast<GroupNormM&>(*this);
    return group_norm(x, groups, t.leaf(m.gain), t.leaf(m.bias));
  }
};

template <typename S>
struct ResBlock {
  GroupNormM<S> n1, n2;
  Conv2dM<S> cv1, cv2, skip;
  Linear<S> temb_proj;
  bool channel_change = false;

  void init(int cin, int cout, int temb_dim, Rng& rng, ParamSet<S>& ps, const std::string& name) {
    channel_change = cin != cout;
    n1.init(cin, ps, name + ".n1");
    cv1.init(cin, cout, 3, 1, 1, rng, ps, name + ".cv1");
    n2.init(cout, ps, name + ".n2");
    cv2.init(cout, cout, 3, 1, 1, rng, ps, name + ".cv2");
    temb_proj.init(temb_dim, cout, rng, ps, name + ".temb");
    if (channel_change) skip.init(cin, cout, 1, 1, 0, rng, ps, name + ".skip");
  }

  Var<S> operator()(Tape<S>& t, Var<S> x, Var<S> temb) const {
    Var<S> h = cv1(t, silu(n1(t, x)));
    h = add_chan_bias(h, temb_proj(t, silu(temb)));
    h = cv2(t, silu(n2(t, h)));
    Var<S> sk = channel_change ? skip(t, x) : x;
    return add(h, sk);
  }
};

// Base + adapter cross-attention over the spatial tokens of one block.
template <typename S>
struct CondAttentionPair {
  LayerNormModule<S> norm_base, norm_adapter;
  CrossAttention<S> base;     // context: register token
  CrossAttention<S> adapter;  // context: slots
  bool has_adapter = true;
  int channels = 0;

  void init(int channels_, int d_attn, int heads, int d_reg, int d_slots, bool with_adapter,
            Rng& rng, ParamSet<S>& ps, const std::string& name) {
    channels = channels_;
    has_adapter = with_adapter;
    norm_base.init(channels, ps, name + ".norm_base");
    base.init(channels, d_reg, d_attn, heads, rng, ps, name + ".base");
    if (with_adapter) {
      norm_adapter.init(channels, ps, name + ".norm_adapter");
      adapter.init(channels, d_slots, d_attn, heads, rng, ps, name + ".adapter",
                   /*zero_out_proj=*/true);
    }
  }

  struct Out {
    Var<S> x;                        // [B,C,H,W]
    std::vector<Var<S>> attn_dm;     // per sample, K x (H*W); empty without adapter
  };

  Out operator()(Tape<S>& t, Var<S> x, const std::vector<CondVars<S>>& conds) const {
    const Tensor<S>& xv = t.val(x);
    int B = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    if (int(conds.size()) != B) throw std::invalid_argument("cond_attention: batch mismatch");
    int hw = H * W;
    Var<S> tokens = to_tokens(x);  // (B*hw) x C
    std::vector<Var<S>> out_rows;
    Out out;
    for (int b = 0; b < B; ++b) {
      Var<S> tb = rows_slice(tokens, b * hw, hw);
      auto r1 = base(t, norm_base(t, tb), conds[size_t(b)].register_token);
      tb = add(tb, r1.out);
      if (has_adapter) {
        auto r2 = adapter(t, norm_adapter(t, tb), conds[size_t(b)].slots);
        tb = add(tb, r2.out);
        out.attn_dm.push_back(transpose2(r2.attn_mean));  // K x hw
      }
      out_rows.push_back(tb);
    }
    out.x = from_tokens(concat_rows(out_rows), B, C, H, W);
    return out;
  }
};

struct DenoiserConfig {
  int in_channels = 3;
  int c1 = 16, c2 = 32, c3 = 48;
  int d_attn = 64, heads = 4;
  int temb_dim = 64, temb_hidden = 128;
  int d_cond_slots = 64;  // adapter context width (2x slot width in video mode)
  int d_cond_reg = 64;    // register context width
  // adapter placement per block: down1, down2, mid, up1, up2
  std::array<bool, 5> adapters{true, true, false, true, true};
  int guidance_block = 4;  // block whose adapter attention drives guidance
};

// Sinusoidal embedding of integer timesteps, [B, dim].
template <typename S>
Tensor<S> timestep_embedding(const std::vector<int>& ts, int dim) {
  int half = dim / 2;
  Tensor<S> out({int(ts.size()), dim});
  for (size_t b = 0; b < ts.size(); ++b) {
    for (int i = 0; i < half; ++i) {
      double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
      out.at(int(b), i) = S(std::sin(ts[b] * freq));
      out.at(int(b), half + i) = S(std::cos(ts[b] * freq));
    }
  }
  return out;
}

template <typename S>
struct MiniDenoiser {
  DenoiserConfig cfg;
  Linear<S> temb1, temb2;
  Conv2dM<S> stem;
  ResBlock<S> rb_d1, rb_d2, rb_m1, rb_m2, rb_u1, rb_u2;
  Conv2dM<S> down1, down2;
  CondAttentionPair<S> at_d1, at_d2, at_mid, at_u1, at_u2;
  GroupNormM<S> out_norm;
  Conv2dM<S> out_conv;

  void init(const DenoiserConfig& c, Rng& rng, ParamSet<S>& ps, const std::string& name) {
    cfg = c;
    temb1.init(c.temb_dim, c.temb_hidden, rng, ps, name + ".temb1");
    temb2.init(c.temb_hidden, c.temb_hidden, rng, ps, name + ".temb2");
    stem.init(c.in_channels, c.c1, 3, 1, 1, rng, ps, name + ".stem");
    rb_d1.init(c.c1, c.c1, c.temb_hidden, rng, ps, name + ".rb_d1");
    at_d1.init(c.c1, c.d_attn, c.heads, c.d_cond_reg, c.d_cond_slots, c.adapters[0], rng, ps,
               name + ".at_d1");
    down1.init(c.c1, c.c2, 3, 2, 1, rng, ps, name + ".down1");
    rb_d2.init(c.c2, c.c2, c.temb_hidden, rng, ps, name + ".rb_d2");
    at_d2.init(c.c2, c.d_attn, c.heads, c.d_cond_reg, c.d_cond_slots, c.adapters[1], rng, ps,
               name + ".at_d2");
    down2.init(c.c2, c.c3, 3, 2, 1, rng, ps, name + ".down2");
    rb_m1.init(c.c3, c.c3, c.temb_hidden, rng, ps, name + ".rb_m1");
    at_mid.init(c.c3, c.d_attn, c.heads, c.d_cond_reg, c.d_cond_slots, c.adapters[2], rng, ps,
                name + ".at_mid");
    rb_m2.init(c.c3, c.c3, c.temb_hidden, rng, ps, name + ".rb_m2");
    rb_u1.init(c.c3 + c.c2, c.c2, c.temb_hidden, rng, ps, name + ".rb_u1");
    at_u1.init(c.c2, c.d_attn, c.heads, c.d_cond_reg, c.d_cond_slots, c.adapters[3], rng, ps,
               name + ".at_u1");
    rb_u2.init(c.c2 + c.c1, c.c1, c.temb_hidden, rng, ps, name + ".rb_u2");
    at_u2.init(c.c1, c.d_attn, c.heads, c.d_cond_reg, c.d_cond_slots, c.adapters[4], rng, ps,
               name + ".at_u2");
    out_norm.init(c.c1, ps, name + ".out_norm");
    out_conv.init(c.c1, c.in_channels, 3, 1, 1, rng, ps, name + ".out_conv");
  }
};

template <typename S>
struct DenoiseOut {
  Var<S> eps_hat;                // [B,C,H,W]
  std::vector<Var<S>> attn_dm;   // per sample, K x (h'*w') at the guidance block
  int guidance_h = 0, guidance_w = 0;
};

namespace detail {
template <typename S>
Var<S> concat_channels(Tape<S>& t, Var<S> a, Var<S> b) {
  // copy dims out first: val() references die when ops grow the tape
  int B = t.val(a).shape[0], H = t.val(a).shape[2], W = t.val(a).shape[3];
  int Ca = t.val(a).shape[1], Cb = t.val(b).shape[1];
  Var<S> merged = concat_cols(to_tokens(a), to_tokens(b));
  return from_tokens(merged, B, Ca + Cb, H, W);
}
}  // namespace detail

// eps_theta(x_t, t, S, r) plus the head-averaged adapter attention of the
// designated guidance block.
template <typename S>
DenoiseOut<S> predict_noise(Tape<S>& t, const MiniDenoiser<S>& den, Var<S> x_t,
                            const std::vector<int>& ts, const std::vector<CondVars<S>>& conds) {
  const DenoiserConfig& c = den.cfg;
  const Tensor<S>& xv = t.val(x_t);
  if (xv.rank() != 4 || xv.shape[1] != c.in_channels)
    throw std::invalid_argument("predict_noise: bad input shape");
  int B = xv.shape[0], H = xv.shape[2], W = xv.shape[3];
  if (int(ts.size()) != B || int(conds.size()) != B)
    throw std::invalid_argument("predict_noise: batch mismatch");

  Var<S> temb = den.temb2(t, silu(den.temb1(t, t.input(timestep_embedding<S>(ts, c.temb_dim)))));

  DenoiseOut<S> out;
  auto take = [&](typename CondAttentionPair<S>::Out r, int block, int h, int w) {
    if (block == c.guidance_block && !r.attn_dm.empty()) {
      out.attn_dm = std::move(r.attn_dm);
      out.guidance_h = h;
      out.guidance_w = w;
    }
    return r.x;
  };

  Var<S> h0 = den.stem(t, x_t);
  Var<S> d1 = den.rb_d1(t, h0, temb);
  d1 = take(den.at_d1(t, d1, conds), 0, H, W);
  Var<S> h1 = den.down1(t, d1);
  Var<S> d2 = den.rb_d2(t, h1, temb);
  d2 = take(den.at_d2(t, d2, conds), 1, H / 2, W / 2);
  Var<S> h2 = den.down2(t, d2);
  Var<S> m = den.rb_m1(t, h2, temb);
  m = take(den.at_mid(t, m, conds), 2, H / 4, W / 4);
  m = den.rb_m2(t, m, temb);
  Var<S> u1 = den.rb_u1(t, detail::concat_channels(t, upsample_nearest2x(m), d2), temb);
  u1 = take(den.at_u1(t, u1, conds), 3, H / 2, W / 2);
  Var<S> u2 = den.rb_u2(t, detail::concat_channels(t, upsample_nearest2x(u1), d1), temb);
  u2 = take(den.at_u2(t, u2, conds), 4, H, W);
  out.eps_hat = den.out_conv(t, silu(den.out_norm(t, u2)));
  return out;
}

// ---------------------------------------------------------------------------
// value-level inference wrappers (fresh no-grad tape per call)
// ---------------------------------------------------------------------------

template <typename S>
struct NoisePrediction {
  Tensor<S> eps_hat;
  Tensor<S> attn_dm;  // K x (h'*w'), empty if the guidance block has no adapter
  int guidance_h = 0, guidance_w = 0;
};

template <typename S>
NoisePrediction<S> predict_noise_value(const MiniDenoiser<S>& den, const Tensor<S>& x_t, int t,
                                       const ConditioningBundle<S>& bundle) {
  Tape<S> tape;
  NoGradScope<S> ng(tape);
  Tensor<S> x4 = x_t;
  if (x4.rank() == 3) x4.shape.insert(x4.shape.begin(), 1);
  std::vector<CondVars<S>> conds{cond_from_bundle(tape, bundle)};
  auto out = predict_noise(tape, den, tape.input(std::move(x4)), {t}, conds);
  NoisePrediction<S> r;
  r.eps_hat = tape.val(out.eps_hat);
  r.eps_hat.shape = x_t.shape;
  if (!out.attn_dm.empty()) {
    r.attn_dm = tape.val(out.attn_dm[0]);
    r.guidance_h = out.guidance_h;
    r.guidance_w = out.guidance_w;
  }
  return r;
}

// Classifier-free guided noise: eps_null + scale * (eps_cond - eps_null).
template <typename S>
Tensor<S> cfg_noise(const MiniDenoiser<S>& den, const NullConditioning<S>& null_cond,
                    const Tensor<S>& x_t, int t, const ConditioningBundle<S>& bundle,
                    double scale) {
  if (scale < 0) throw std::invalid_argument("cfg_noise: scale >= 0");
  ConditioningBundle<S> null_bundle;
  null_bundle.slots = null_cond.slot.value;
  null_bundle.register_token = null_cond.register_token.value;
  null_bundle.null = true;
  if (scale == 0.0 || bundle.null) return predict_noise_value(den, x_t, t, null_bundle).eps_hat;
  Tensor<S> eps_c = predict_noise_value(den, x_t, t, bundle).eps_hat;
  if (scale == 1.0) return eps_c;
  Tensor<S> eps_n = predict_noise_value(den, x_t, t, null_bundle).eps_hat;
  Tensor<S> out(eps_c.shape);
  for (int64_t i = 0; i < out.numel(); ++i)
    out[i] = S(double(eps_n[i]) + scale * (double(eps_c[i]) - double(eps_n[i])));
  return out;
}

// Ancestral sampling from pure noise; returns an image in [0,1].
template <typename S>
Tensor<S> p_sample_loop(const MiniDenoiser<S>& den, const NullConditioning<S>& null_cond,
                        const ConditioningBundle<S>& bundle, const NoiseSchedule& sched, Rng& rng,
                        double scale, int H, int W) {
  Tensor<S> x = Tensor<S>::randn({den.cfg.in_channels, H, W}, rng);
  for (int t = sched.T - 1; t >= 0; --t) {
    Tensor<S> eps = cfg_noise(den, null_cond, x, t, bundle, scale);
    Tensor<S> mu = posterior_mean(x, t, eps, sched);
    if (t > 0) {
      S sd = S(std::sqrt(sched.posterior_var[size_t(t)]));
      for (int64_t i = 0; i < mu.numel(); ++i) mu[i] += sd * S(rng.normal());
    }
    x = std::move(mu);
  }
  for (auto& v : x.data) v = (std::min(S(1), std::max(S(-1), v)) + S(1)) / S(2);
  return x;
}

}  // namespace slotdiff

#pragma once

#include "slotdiff/slot_attention.hpp"

// Invariant Slot Attention: each slot carries position and scale parameters
// defining a per-slot relative coordinate frame. Keys are augmented with a
// projection of the relative grid, and poses are re-estimated every
// iteration as the attention-weighted mean / standard deviation of the
// absolute patch coordinates.

namespace slotdiff {

template <typename S>
struct IsaParams {
  int num_slots = 4, d_slot = 64, d_key = 64, iters = 3;
  S scale_floor = S(0.02);
  S scale_init = S(0.5);
  S pos_init_span = S(0.5);  // positions start uniform in the central half
  bool mean_aggregation = true;
  LayerNormModule<S> norm_inputs, norm_slots;
  Linear<S> proj_q, proj_k, proj_g, proj_p, proj_v;
  GruCell<S> gru;
  Parameter<S> mu0, log_sigma0;

  void init(int K, int d_feat, int d_slot_, int d_key_, int iters_, Rng& rng, ParamSet<S>& ps,
            const std::string& name) {
    num_slots = K;
    d_slot = d_slot_;
    d_key = d_key_;
    iters = iters_;
    norm_inputs.init(d_feat, ps, name + ".norm_inputs");
    norm_slots.init(d_slot, ps, name + ".norm_slots");
    proj_q.init(d_slot, d_key, rng, ps, name + ".q", false);
    proj_k.init(d_feat, d_key, rng, ps, name + ".k", false);
    proj_g.init(2, d_key, rng, ps, name + ".g", false);
    proj_p.init(d_key, d_key, rng, ps, name + ".p", false);
    proj_v.init(d_feat, d_slot, rng, ps, name + ".v", false);
    gru.init(d_slot, d_slot, rng, ps, name + ".gru");
    init_zeros(mu0, {1, d_slot});
    init_zeros(log_sigma0, {1, d_slot});
    ps.add(mu0, name + ".mu0");
    ps.add(log_sigma0, name + ".log_sigma0");
  }
};

template <typename S>
struct IsaStateVars {
  Var<S> slots;  // K x d_slot, pose-invariant identity
  Var<S> pos;    // K x 2
  Var<S> scale;  // K x 2, componentwise >= scale_floor
  Var<S> attn;   // K x N, columns sum to 1 across slots
};

// Relative grid for one slot: (G_abs - pos_j) / scale_j.
template <typename S>
Var<S> relative_grid(Tape<S>& t, Var<S> grid, Var<S> pos, Var<S> scale, int j) {
  return div_rowvec(sub_rowvec(grid, row(pos, j)), row(scale, j));
}

template <typename S>
struct PoseUpdate {
  Var<S> pos;    // K x 2 attention-weighted mean of absolute coordinates
  Var<S> scale;  // K x 2 attention-weighted standard deviation, floored
};

// Pose re-estimation from an attention map (K x N) over grid rows (N x 2).
template <typename S>
PoseUpdate<S> isa_pose_update(Tape<S>& t, Var<S> attn, Var<S> grid, S scale_floor) {
  Var<S> totals = add_const(row_sum(attn), S(1e-8));  // K x 1
  Var<S> pos = div_colvec(matmul(attn, grid), totals);
  Tensor<S> grid_sq(t.val(grid).shape);
  {
    const Tensor<S>& gv = t.val(grid);
    for (int64_t i = 0; i < gv.numel(); ++i) grid_sq[i] = gv[i] * gv[i];
  }
  Var<S> second_moment = div_colvec(matmul(attn, t.input(std::move(grid_sq))), totals);
  Var<S> variance = clamp_min_v(sub(second_moment, mul(pos, pos)), S(0));
  Var<S> scale = clamp_min_v(sqrt_eps(variance, S(1e-12)), scale_floor);
  return {pos, scale};
}

template <typename S>
IsaStateVars<S> isa_step(Tape<S>& t, const IsaStateVars<S>& state, Var<S> tokens, Var<S> grid,
                         const IsaParams<S>& p) {
  auto& m = const_cast<IsaParams<S>&>(p);
  int K = p.num_slots;
  Var<S> fn = m.norm_inputs(t, tokens);
  Var<S> kf = m.proj_k(t, fn);  // N x d_key
  Var<S> v = m.proj_v(t, fn);   // N x d_slot
  Var<S> q = m.proj_q(t, m.norm_slots(t, state.slots));  // K x d_key
  S inv_sqrt = S(1.0 / std::sqrt(double(p.d_key)));

  std::vector<Var<S>> logit_rows;
  for (int j = 0; j < K; ++j) {
    Var<S> grel = relative_grid(t, grid, state.pos, state.scale, j);
    Var<S> kaug = m.proj_p(t, add(kf, m.proj_g(t, grel)));     // N x d_key
    Var<S> lj = scale(matmul(kaug, row(q, j), false, true), inv_sqrt);  // N x 1
    logit_rows.push_back(reshape(lj, {1, t.val(tokens).rows()}));
  }
  Var<S> logits = concat_rows(logit_rows);    // K x N
  Var<S> attn = softmax(logits, 0);           // compete across slots per feature

  PoseUpdate<S> pose = isa_pose_update(t, attn, grid, p.scale_floor);
  Var<S> update = matmul(attn, v);  // K x d_slot
  if (p.mean_aggregation) {
    Var<S> totals = add_const(row_sum(attn), S(1e-8));
    update = div_colvec(update, totals);
  }
  Var<S> slots_next = gru_step(t, p.gru, state.slots, update);
  return {slots_next, pose.pos, pose.scale, attn};
}

// Optional warm start lets the video pipeline propagate the previous
// frame's state so slot indices stay aligned across frames.
template <typename S>
struct IsaWarmStart {
  Tensor<S> slots, pos, scale;
  bool valid = false;
};

template <typename S>
IsaStateVars<S> isa(Tape<S>& t, Var<S> tokens, Var<S> grid, const IsaParams<S>& p, Rng& rng,
                    const IsaWarmStart<S>* warm = nullptr) {
  if (p.iters < 1) throw std::invalid_argument("isa: iters >= 1");
  auto& m = const_cast<IsaParams<S>&>(p);
  IsaStateVars<S> st;
  if (warm != nullptr && warm->valid) {
    st.slots = t.input(warm->slots);
    st.pos = t.input(warm->pos);
    st.scale = t.input(warm->scale);
  } else {
    Tensor<S> eps = Tensor<S>::randn({p.num_slots, p.d_slot}, rng);
    Var<S> sigma = exp_v(t.leaf(m.log_sigma0));
    st.slots = add_rowvec(mul_rowvec(t.input(std::move(eps)), sigma), t.leaf(m.mu0));
    Tensor<S> pos0({p.num_slots, 2});
    for (auto& v : pos0.data) v = S(rng.uniform(-double(p.pos_init_span), double(p.pos_init_span)));
    st.pos = t.input(std::move(pos0));
    st.scale = t.input(Tensor<S>::full({p.num_slots, 2}, p.scale_init));
  }
  st.attn = Var<S>{};
  for (int it = 0; it < p.iters; ++it) st = isa_step(t, st, tokens, grid, p);
  return st;
}

// ISA attention is K x N; transpose into the N x K layout shared with
// standard slot attention readouts.
template <typename S>
Tensor<S> isa_attn_nk(const Tensor<S>& attn_kn) {
  int K = attn_kn.rows(), N = attn_kn.cols();
  Tensor<S> out({N, K});
  for (int k = 0; k < K; ++k)
    for (int i = 0; i < N; ++i) out.at(i, k) = attn_kn.at(k, i);
  return out;
}

}  // namespace slotdiff

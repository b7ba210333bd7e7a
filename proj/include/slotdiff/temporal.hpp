#pragma once

#include "slotdiff/isa.hpp"

// Video extension: transformer aggregators that enrich per-frame slots and
// register tokens with whole-clip context, the concatenation augmentation
// of the video slots, and the explicit pose-fusion variant.

namespace slotdiff {

template <typename S>
struct TransformerLayer {
  LayerNormModule<S> n1, n2;
  CrossAttention<S> attn;  // self-attention: queries == context
  Mlp<S> mlp;

  void init(int d, int heads, Rng& rng, ParamSet<S>& ps, const std::string& name) {
    n1.init(d, ps, name + ".n1");
    n2.init(d, ps, name + ".n2");
    attn.init(d, d, d, heads, rng, ps, name + ".attn");
    mlp.init(d, 2 * d, d, rng, ps, name + ".mlp");
  }

  Var<S> operator()(Tape<S>& t, Var<S> x, const std::vector<char>* key_mask = nullptr) const {
    Var<S> a = n1(t, x);
    x = add(x, attn(t, a, a, key_mask).out);
    return add(x, mlp(t, n2(t, x)));
  }
};

template <typename S>
struct TransformerEncoder {
  std::vector<TransformerLayer<S>> layers;

  void init(int d, int heads, int depth, Rng& rng, ParamSet<S>& ps, const std::string& name) {
    layers.resize(size_t(depth));
    for (int i = 0; i < depth; ++i)
      layers[size_t(i)].init(d, heads, rng, ps, name + ".l" + std::to_string(i));
  }

  Var<S> operator()(Tape<S>& t, Var<S> x, const std::vector<char>* key_mask = nullptr) const {
    for (const auto& l : layers) x = l(t, x, key_mask);
    return x;
  }
};

template <typename S>
struct TemporalParams {
  int d = 64, max_frames = 16, heads = 4, depth = 2;
  TransformerEncoder<S> slot_agg;  // over all L*K slot tokens (V1)
  Parameter<S> slot_pos;           // max_frames x d, learned temporal embedding
  TransformerEncoder<S> reg_agg;   // over the L register tokens (V1)
  Parameter<S> reg_pos;
  Linear<S> grid_proj_h;           // V2: 2 -> d relative-grid projection
  LayerNormModule<S> fuse_norm;    // V2: LayerNorm before the ReLU
  TransformerEncoder<S> v2_agg;    // V2: over pose-fused slot tokens
  Parameter<S> v2_pos;

  void init(int d_, int max_frames_, Rng& rng, ParamSet<S>& ps, const std::string& name) {
    d = d_;
    max_frames = max_frames_;
    slot_agg.init(d, heads, depth, rng, ps, name + ".slot_agg");
    init_normal(slot_pos, {max_frames, d}, rng, 0.02);
    ps.add(slot_pos, name + ".slot_pos");
    reg_agg.init(d, heads, depth, rng, ps, name + ".reg_agg");
    init_normal(reg_pos, {max_frames, d}, rng, 0.02);
    ps.add(reg_pos, name + ".reg_pos");
    grid_proj_h.init(2, d, rng, ps, name + ".grid_proj_h", false);
    fuse_norm.init(d, ps, name + ".fuse_norm");
    v2_agg.init(d, heads, depth, rng, ps, name + ".v2_agg");
    init_normal(v2_pos, {max_frames, d}, rng, 0.02);
    ps.add(v2_pos, name + ".v2_pos");
  }
};

namespace detail {

// Per-frame key mask expanded to tokens_per_frame entries each.
inline std::vector<char> expand_mask(const std::vector<char>& frame_mask, int per_frame) {
  std::vector<char> out;
  for (char m : frame_mask)
    for (int i = 0; i < per_frame; ++i) out.push_back(m);
  return out;
}

}  // namespace detail

// Flattens L frames of K slots into one (L*K)-token sequence, adds the
// learned temporal embedding of each frame index, runs the transformer, and
// splits back. `frame_valid` (optional) masks padded frames out of the keys.
template <typename S>
std::vector<Var<S>> aggregate_slots(Tape<S>& t, const std::vector<Var<S>>& per_frame,
                                    const TemporalParams<S>& p,
                                    const std::vector<char>* frame_valid = nullptr) {
  if (per_frame.empty()) throw std::invalid_argument("aggregate_slots: L >= 1");
  auto& m = const_cast<TemporalParams<S>&>(p);
  int L = int(per_frame.size());
  if (L > p.max_frames) throw std::invalid_argument("aggregate_slots: clip longer than max_frames");
  int K = t.val(per_frame[0]).rows();
  Var<S> pe = t.leaf(m.slot_pos);
  std::vector<Var<S>> with_pos;
  for (int f = 0; f < L; ++f)
    with_pos.push_back(add(per_frame[size_t(f)], tile_rows(row(pe, f), K)));
  Var<S> tokens = concat_rows(with_pos);
  std::vector<char> mask;
  const std::vector<char>* mask_ptr = nullptr;
  if (frame_valid != nullptr) {
    mask = detail::expand_mask(*frame_valid, K);
    mask_ptr = &mask;
  }
  Var<S> out = p.slot_agg(t, tokens, mask_ptr);
  std::vector<Var<S>> result;
  for (int f = 0; f < L; ++f) result.push_back(rows_slice(out, f * K, K));
  return result;
}

// Exact concatenation along the feature axis: the final video slots carry
// the raw per-frame slots in the first D channels and the temporally
// enriched version in the last D.
template <typename S>
Var<S> augment(Var<S> per_frame, Var<S> aggregated) {
  return concat_cols(per_frame, aggregated);
}

template <typename S>
struct GlobalTokensVars {
  std::vector<Var<S>> per_frame;   // 1 x d each, mean-pooled frame features
  std::vector<Var<S>> aggregated;  // 1 x d each, after the register transformer
};

// Mean-pools each frame's backbone features into a register token, then
// runs the separate temporal transformer over the L tokens.
template <typename S>
GlobalTokensVars<S> aggregate_registers(Tape<S>& t, const std::vector<Var<S>>& frame_features,
                                        const TemporalParams<S>& p,
                                        const std::vector<char>* frame_valid = nullptr) {
  if (frame_features.empty()) throw std::invalid_argument("aggregate_registers: L >= 1");
  auto& m = const_cast<TemporalParams<S>&>(p);
  int L = int(frame_features.size());
  GlobalTokensVars<S> out;
  std::vector<Var<S>> with_pos;
  Var<S> pe = t.leaf(m.reg_pos);
  for (int f = 0; f < L; ++f) {
    Var<S> r = mean_rows(frame_features[size_t(f)]);
    out.per_frame.push_back(r);
    with_pos.push_back(add(r, row(pe, f)));
  }
  Var<S> tokens = concat_rows(with_pos);
  Var<S> agg = p.reg_agg(t, tokens, frame_valid);
  for (int f = 0; f < L; ++f) out.aggregated.push_back(rows_slice(agg, f, 1));
  return out;
}

template <typename S>
struct PoseAwareSlotsVars {
  std::vector<Var<S>> fused;     // K x d per frame, pose-fused then aggregated
  std::vector<Var<S>> register_token;  // 1 x d per frame, mean of the aggregated slots
};

// Explicit pose conditioning: per slot, project its relative grid, add the
// broadcast slot embedding, pool over space, and pass through
// ReLU(LayerNorm(.)). The per-frame results run through their own temporal
// transformer; the register is the slot mean of the aggregated slots.
template <typename S>
PoseAwareSlotsVars<S> fuse_pose_v2(Tape<S>& t, const std::vector<IsaStateVars<S>>& states,
                                   Var<S> grid, const TemporalParams<S>& p,
                                   const std::vector<char>* frame_valid = nullptr) {
  if (states.empty()) throw std::invalid_argument("fuse_pose_v2: L >= 1");
  auto& m = const_cast<TemporalParams<S>&>(p);
  int L = int(states.size());
  int K = t.val(states[0].slots).rows();
  std::vector<Var<S>> fused_frames;
  for (int f = 0; f < L; ++f) {
    const IsaStateVars<S>& st = states[size_t(f)];
    std::vector<Var<S>> rows;
    for (int j = 0; j < K; ++j) {
      Var<S> grel = relative_grid(t, grid, st.pos, st.scale, j);
      Var<S> ghat = m.grid_proj_h(t, grel);                 // N x d
      Var<S> pooled = mean_rows(ghat);                      // 1 x d
      Var<S> pj = add(row(st.slots, j), pooled);            // slot + spatial mean
      rows.push_back(relu(m.fuse_norm(t, pj)));
    }
    fused_frames.push_back(concat_rows(rows));  // K x d
  }
  // temporal aggregation with the V2 transformer
  std::vector<Var<S>> with_pos;
  Var<S> pe = t.leaf(m.v2_pos);
  for (int f = 0; f < L; ++f)
    with_pos.push_back(add(fused_frames[size_t(f)], tile_rows(row(pe, f), K)));
  std::vector<char> mask;
  const std::vector<char>* mask_ptr = nullptr;
  if (frame_valid != nullptr) {
    mask = detail::expand_mask(*frame_valid, K);
    mask_ptr = &mask;
  }
  Var<S> agg = p.v2_agg(t, concat_rows(with_pos), mask_ptr);
  PoseAwareSlotsVars<S> out;
  for (int f = 0; f < L; ++f) {
    Var<S> sf = rows_slice(agg, f * K, K);
    out.fused.push_back(sf);
    out.register_token.push_back(mean_rows(sf));
  }
  return out;
}

}  // namespace slotdiff

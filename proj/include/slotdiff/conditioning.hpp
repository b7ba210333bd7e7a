#pragma once

#include "slotdiff/nn.hpp"

// The (slots, register, null) conditioning payload fed to the denoiser.
// Slots drive the adapter cross-attention; the register token — the mean of
// the slot vectors — goes to the base cross-attention path.

namespace slotdiff {

template <typename S>
struct ConditioningBundle {
  Tensor<S> slots;           // K x Dc
  Tensor<S> register_token;  // 1 x Dr
  bool null = false;

  int num_slots() const { return null ? 0 : slots.rows(); }
};

template <typename S>
Tensor<S> slot_mean(const Tensor<S>& slots) {
  Tensor<S> reg({1, slots.cols()});
  for (int c = 0; c < slots.cols(); ++c) {
    double acc = 0;
    for (int r = 0; r < slots.rows(); ++r) acc += double(slots.at(r, c));
    reg.at(0, c) = S(acc / slots.rows());
  }
  return reg;
}

template <typename S>
ConditioningBundle<S> bundle_from_slots(Tensor<S> slots) {
  ConditioningBundle<S> b;
  b.register_token = slot_mean(slots);
  b.slots = std::move(slots);
  return b;
}

// ---------------------------------------------------------------------------
// slot-space edits
// ---------------------------------------------------------------------------

template <typename S>
struct EditOp {
  enum class Kind { Remove, Replace, Add } kind = Kind::Remove;
  int index = 0;     // slot row for remove/replace
  Tensor<S> slot;    // 1 x Dc payload for replace/add

  static EditOp remove(int j) { return {Kind::Remove, j, {}}; }
  static EditOp replace(int j, Tensor<S> s) { return {Kind::Replace, j, std::move(s)}; }
  static EditOp add(Tensor<S> s) { return {Kind::Add, 0, std::move(s)}; }
};

// Applies one edit and recomputes the register token as the mean of the
// edited slots. When the register lives in a different space than the slots
// (the video V1 variant pools backbone features instead), the original
// register is kept: a slot mean is dimensionally undefined there.
template <typename S>
ConditioningBundle<S> edit_bundle(const ConditioningBundle<S>& bundle, const EditOp<S>& op) {
  if (bundle.null) throw std::invalid_argument("edit_bundle: cannot edit a null bundle");
  int K = bundle.slots.rows(), D = bundle.slots.cols();
  using Kind = typename EditOp<S>::Kind;
  if (op.kind != Kind::Add) {
    if (op.index < 0 || op.index >= K)
      throw std::out_of_range("edit_bundle: slot index " + std::to_string(op.index) +
                              " out of range for K=" + std::to_string(K));
  }
  Tensor<S> slots;
  switch (op.kind) {
    case Kind::Remove: {
      if (K <= 1) throw std::invalid_argument("edit_bundle: cannot remove the last slot");
      slots = Tensor<S>({K - 1, D});
      int r2 = 0;
      for (int r = 0; r < K; ++r) {
        if (r == op.index) continue;
        std::copy_n(bundle.slots.data.data() + size_t(r) * D, D,
                    slots.data.data() + size_t(r2++) * D);
      }
      break;
    }
    case Kind::Replace: {
      if (op.slot.numel() != D) throw std::invalid_argument("edit_bundle: replacement width mismatch");
      slots = bundle.slots;
      std::copy_n(op.slot.data.data(), D, slots.data.data() + size_t(op.index) * D);
      break;
    }
    case Kind::Add: {
      if (op.slot.numel() != D) throw std::invalid_argument("edit_bundle: added slot width mismatch");
      slots = Tensor<S>({K + 1, D});
      std::copy_n(bundle.slots.data.data(), size_t(K) * D, slots.data.data());
      std::copy_n(op.slot.data.data(), D, slots.data.data() + size_t(K) * D);
      break;
    }
  }
  if (bundle.register_token.cols() != D) {
    ConditioningBundle<S> out;
    out.slots = std::move(slots);
    out.register_token = bundle.register_token;
    return out;
  }
  return bundle_from_slots(std::move(slots));
}

// ---------------------------------------------------------------------------
// tape-side conditioning used during training
// ---------------------------------------------------------------------------

template <typename S>
struct CondVars {
  Var<S> slots;           // K x Dc
  Var<S> register_token;  // 1 x Dr
  bool null = false;
};

// Learned embeddings standing in for (slots, register) on condition-dropped
// items; the unconditional branch of classifier-free guidance.
template <typename S>
struct NullConditioning {
  Parameter<S> slot, register_token;

  void init(int d_cond, int d_reg, Rng& rng, ParamSet<S>& ps, const std::string& name) {
    init_normal(slot, {1, d_cond}, rng, 0.02);
    init_normal(register_token, {1, d_reg}, rng, 0.02);
    ps.add(slot, name + ".slot");
    ps.add(register_token, name + ".register");
  }

  CondVars<S> vars(Tape<S>& t) const {
    auto& m = const_cast<NullConditioning&>(*this);
    return {t.leaf(m.slot), t.leaf(m.register_token), true};
  }
};

template <typename S>
CondVars<S> cond_from_slots(Tape<S>& t, Var<S> slots) {
  return {slots, mean_rows(slots), false};
}

template <typename S>
CondVars<S> cond_from_bundle(Tape<S>& t, const ConditioningBundle<S>& b) {
  return {t.input(b.slots), t.input(b.register_token), b.null};
}

}  // namespace slotdiff

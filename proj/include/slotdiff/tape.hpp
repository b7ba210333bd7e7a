#pragma once

#include <deque>
#include <functional>
#include <stdexcept>
#include <unordered_map>
#include <utility>
#include <vector>

#include "slotdiff/tensor.hpp"

namespace slotdiff {

template <typename S>
class Tape;

// Learnable value. Gradient accumulates across backward passes until
// zero_grad; shape of grad always mirrors value.
template <typename S>
struct Parameter {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;
  bool trainable = true;

  Parameter() = default;
  void set(Tensor<S> v) {
    value = std::move(v);
    grad = Tensor<S>(value.shape);
  }
  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), S(0)); }
};

// Handle into a Tape node.
template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

// Dynamically recorded computation tape for reverse-mode differentiation.
// Single-writer: one tape per thread of computation. Nodes own their output
// values; gradients are materialized lazily during backward so untouched
// subgraphs cost nothing.
template <typename S>
class Tape {
 public:
  struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    std::function<void(Tape&)> back;  // adds into parents' grads
    bool needs_grad = false;
  };

  bool grad_enabled = true;

  Var<S> input(Tensor<S> v) {
    nodes_.push_back(Node{std::move(v), {}, nullptr, false});
    return Var<S>{this, int(nodes_.size()) - 1};
  }

  // One leaf per parameter per tape; repeated uses share the node so the
  // recorded graph stays small under weight sharing.
  Var<S> leaf(Parameter<S>& p) {
    auto it = param_leaves_.find(&p);
    if (it != param_leaves_.end() && it->second < int(nodes_.size())) return Var<S>{this, it->second};
    Parameter<S>* pp = &p;
    int id = int(nodes_.size());
    nodes_.push_back(Node{p.value, {}, nullptr, grad_enabled});
    if (grad_enabled) {
      nodes_.back().back = [pp, id](Tape& t) {
        Node& n = t.nodes_[size_t(id)];
        pp->grad.vec() += n.grad.vec();
      };
    }
    param_leaves_[&p] = id;
    return Var<S>{this, id};
  }

  Var<S> make(Tensor<S> v, bool needs_grad, std::function<void(Tape&)> back) {
    if (!grad_enabled) needs_grad = false;
    nodes_.push_back(Node{std::move(v), {}, needs_grad ? std::move(back) : nullptr, needs_grad});
    return Var<S>{this, int(nodes_.size()) - 1};
  }

  const Tensor<S>& val(Var<S> x) const { return nodes_[size_t(x.id)].value; }
  const Tensor<S>& val(int id) const { return nodes_[size_t(id)].value; }
  bool needs_grad(Var<S> x) const { return nodes_[size_t(x.id)].needs_grad; }

  // Gradient buffer of a node, allocated on first touch.
  Tensor<S>& grad(int id) {
    Node& n = nodes_[size_t(id)];
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor<S>(n.value.shape);
    return n.grad;
  }
  Tensor<S>& grad(Var<S> x) { return grad(x.id); }
  bool grad_touched(int id) const { return !nodes_[size_t(id)].grad.empty(); }

  // Reverse accumulation from a scalar loss into every reachable leaf.
  void backward(Var<S> loss) {
    if (!loss.valid() || loss.tape != this) throw std::invalid_argument("backward: foreign var");
    if (nodes_[size_t(loss.id)].value.numel() != 1)
      throw std::invalid_argument("backward: loss must be scalar");
    grad(loss.id).data[0] = S(1);
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[size_t(id)];
      if (n.back && !n.grad.empty()) n.back(*this);
    }
  }

  size_t mark() const { return nodes_.size(); }

  // Drop nodes recorded past a mark. Used by samplers and training loops to
  // bound memory; parameter-leaf memoization past the mark is invalidated.
  void rewind(size_t m) {
    if (m > nodes_.size()) return;
    while (nodes_.size() > m) nodes_.pop_back();
    for (auto it = param_leaves_.begin(); it != param_leaves_.end();) {
      if (it->second >= int(m))
        it = param_leaves_.erase(it);
      else
        ++it;
    }
  }

  void clear() {
    nodes_.clear();
    param_leaves_.clear();
  }

  size_t size() const { return nodes_.size(); }

 private:
  std::deque<Node> nodes_;  // reference-stable under growth
  std::unordered_map<const Parameter<S>*, int> param_leaves_;
};

// Scoped no-grad region: record values only.
template <typename S>
struct NoGradScope {
  Tape<S>& tape;
  bool prev;
  explicit NoGradScope(Tape<S>& t) : tape(t), prev(t.grad_enabled) { t.grad_enabled = false; }
  ~NoGradScope() { tape.grad_enabled = prev; }
};

}  // namespace slotdiff

#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "nabla/tensor.hpp"

namespace nabla {

enum class OpKind {
  Leaf,
  Param,
  Conv2d,
  ConvTranspose2d,
  MaxPool,
  BatchNorm,
  Relu,
  Sigmoid,
  Softmax,
  Concat,
  Add,
  Mul,
  GlobalAvgPool,
  Sum,
  BceLoss,
  CceLoss,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Param: return "param";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::ConvTranspose2d: return "conv_transpose2d";
    case OpKind::MaxPool: return "maxpool";
    case OpKind::BatchNorm: return "batchnorm";
    case OpKind::Relu: return "relu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Softmax: return "softmax";
    case OpKind::Concat: return "concat";
    case OpKind::Add: return "add";
    case OpKind::Mul: return "mul";
    case OpKind::GlobalAvgPool: return "global_avg_pool";
    case OpKind::Sum: return "sum";
    case OpKind::BceLoss: return "bce_loss";
    case OpKind::CceLoss: return "cce_loss";
  }
  return "?";
}

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

/// Append-only record of a forward computation. Values are owned by the tape
/// (parameters are referenced, not copied); backward() replays the records in
/// reverse and finally accumulates into each referenced parameter's grad().
///
/// A tape created with recording disabled still logs op kinds and wiring, so
/// graph inspection works in inference, but keeps no backward closures.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const std::vector<T>& out_grad)>;

  struct Record {
    OpKind kind;
    std::vector<std::size_t> inputs;
    std::size_t output;
    std::string tag;
    BackwardFn backward;
  };

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }

  Var leaf(Tensor<T> value, bool requires_grad = false) {
    Node n;
    n.owned = std::move(value);
    n.needs_grad = requires_grad && recording_;
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  /// References a parameter; repeated registration returns the same Var so
  /// weight sharing accumulates into a single gradient.
  Var param(Tensor<T>& p) {
    if (auto it = param_ids_.find(&p); it != param_ids_.end()) return Var{it->second};
    Node n;
    n.param = &p;
    n.needs_grad = recording_;
    nodes_.push_back(std::move(n));
    param_ids_.emplace(&p, nodes_.size() - 1);
    return Var{nodes_.size() - 1};
  }

  const Tensor<T>& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.param ? *n.param : n.owned;
  }
  const Shape& shape(Var v) const { return value(v).shape(); }

  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }

  /// Gradient buffer of a node, zero-allocated on first use.
  std::vector<T>& grad(Var v) { return grad(v.id); }
  std::vector<T>& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad.assign(value(Var{id}).numel(), T(0));
    return n.grad;
  }
  bool has_grad(Var v) const { return !nodes_.at(v.id).grad.empty(); }

  Var push(OpKind kind, std::vector<Var> inputs, Tensor<T> value, BackwardFn backward,
           std::string tag = {}) {
    Node n;
    n.owned = std::move(value);
    for (Var in : inputs) n.needs_grad = n.needs_grad || nodes_.at(in.id).needs_grad;
    nodes_.push_back(std::move(n));
    Record r{kind, {}, nodes_.size() - 1, std::move(tag), {}};
    r.inputs.reserve(inputs.size());
    for (Var in : inputs) r.inputs.push_back(in.id);
    if (nodes_.back().needs_grad) r.backward = std::move(backward);
    records_.push_back(std::move(r));
    return Var{nodes_.size() - 1};
  }

  /// Reverse-mode sweep from a scalar loss. Parameter gradients are added to
  /// Tensor::grad() so repeated backward calls accumulate.
  void backward(Var loss) {
    if (value(loss).numel() != 1) {
      throw ShapeError("backward: loss must be scalar, got shape " + value(loss).shape().str());
    }
    if (!recording_) throw std::logic_error("backward: tape was not recording");
    grad(loss).assign(1, T(1));
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      Node& out = nodes_[it->output];
      if (!it->backward || out.grad.empty()) continue;
      it->backward(*this, out.grad);
    }
    for (Node& n : nodes_) {
      if (!n.param || n.grad.empty()) continue;
      auto& g = n.param->grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  }

  std::span<const Record> records() const { return records_; }

  std::size_t count(OpKind kind, std::string_view tag = {}) const {
    std::size_t c = 0;
    for (const auto& r : records_)
      if (r.kind == kind && (tag.empty() || r.tag == tag)) ++c;
    return c;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> owned;
    Tensor<T>* param = nullptr;
    std::vector<T> grad;
    bool needs_grad = false;
  };

  bool recording_;
  std::deque<Node> nodes_;  // deque: value references stay valid while recording
  std::vector<Record> records_;
  std::unordered_map<const Tensor<T>*, std::size_t> param_ids_;
};

}  // namespace nabla

#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "comem/error.hpp"
#include "comem/parameters.hpp"
#include "comem/tensor.hpp"

namespace comem {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while its tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Shape& shape() const { return tape_->shape(id_); }
  std::span<const T> value() const { return tape_->value(id_); }
  T item() const { return tape_->value(id_)[0]; }
  std::size_t size() const { return shape().numel(); }

  Tensor<T> tensor() const {
    auto v = value();
    return Tensor<T>(shape(), std::vector<T>(v.begin(), v.end()));
  }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode computation record. Nodes are appended in evaluation order,
/// so their index order is a topological order and backward() is a single
/// reverse sweep. One tape belongs to one thread.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  /// With record_gradients = false parameters are bound as constants, so no
  /// backward closures are recorded (inference).
  explicit Tape(bool record_gradients = true) : record_(record_gradients) { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> t) { return push(t.shape(), std::move(t.storage()), nullptr, false, {}); }
  Var<T> constant(Shape s, std::vector<T> v) {
    if (v.size() != s.numel()) throw DimensionError("constant: data does not match shape " + s.str());
    return push(std::move(s), std::move(v), nullptr, false, {});
  }
  Var<T> zeros(Shape s) {
    std::vector<T> v(s.numel(), T(0));
    return push(std::move(s), std::move(v), nullptr, false, {});
  }

  /// Free leaf that records a gradient; used by tests that differentiate
  /// with respect to raw inputs.
  Var<T> variable(Tensor<T> t) { return push(t.shape(), std::move(t.storage()), nullptr, true, {}); }

  /// Leaf bound to a stored parameter. The value is read in place, so the
  /// store must stay unmodified while this tape is in use. Repeated calls for
  /// the same parameter return the same node.
  Var<T> param(const ParameterStore<T>& store, std::size_t index) {
    if (bound_store_ && bound_store_ != &store) throw ConfigError("tape already bound to another parameter store");
    bound_store_ = &store;
    if (auto it = param_nodes_.find(index); it != param_nodes_.end()) return Var<T>(this, it->second);
    const auto& t = store.value(index);
    Var<T> v = push(t.shape(), {}, t.storage().data(), record_, {});
    nodes_.back().param = static_cast<long>(index);
    param_nodes_.emplace(index, v.id());
    return v;
  }
  Var<T> param(const ParameterStore<T>& store, const std::string& name) { return param(store, store.index(name)); }

  /// Record an op output. It requires a gradient iff any input does.
  Var<T> emit(Shape s, std::vector<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    bool rg = false;
    for (const auto& in : inputs) rg = rg || nodes_.at(in.id()).requires_grad;
    return push(std::move(s), std::move(value), nullptr, rg, rg ? std::move(fn) : BackwardFn{});
  }
  Var<T> emit(Shape s, std::vector<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn) {
    bool rg = false;
    for (const auto& in : inputs) rg = rg || nodes_.at(in.id()).requires_grad;
    return push(std::move(s), std::move(value), nullptr, rg, rg ? std::move(fn) : BackwardFn{});
  }

  const Shape& shape(std::size_t id) const { return nodes_[id].shape; }
  std::span<const T> value(std::size_t id) const {
    const auto& n = nodes_[id];
    if (n.external) return {n.external, n.shape.numel()};
    return n.value;
  }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Mutable gradient buffer of a node, zero-filled on first access.
  std::span<T> grad(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.shape.numel(), T(0));
    return n.grad;
  }
  /// Gradient of a node after backward(); all zeros if nothing flowed into it.
  std::vector<T> grad_of(Var<T> v) const {
    const auto& n = nodes_[v.id()];
    if (n.grad.empty()) return std::vector<T>(n.shape.numel(), T(0));
    return n.grad;
  }

  /// Seed d(loss)/d(loss) = seed and sweep the tape in reverse. Only nodes
  /// recorded before the loss participate.
  void backward(Var<T> loss, T seed = T(1)) {
    if (loss.shape().numel() != 1) throw DimensionError("backward: loss must be a scalar, got " + loss.shape().str());
    if (!nodes_[loss.id()].requires_grad) return;
    grad(loss.id())[0] += seed;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, i);
    }
  }

  /// Add the gradients of all parameter leaves into `out`.
  void accumulate(Gradients<T>& out) const {
    for (const auto& [index, id] : param_nodes_) {
      const auto& n = nodes_[id];
      if (n.grad.empty()) continue;
      auto& dst = out[index];
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += n.grad[k];
    }
  }

 private:
  struct Node {
    Shape shape;
    std::vector<T> value;
    const T* external = nullptr;
    std::vector<T> grad;
    BackwardFn backward;
    bool requires_grad = false;
    long param = -1;
  };

  Var<T> push(Shape s, std::vector<T> value, const T* external, bool rg, BackwardFn fn) {
    nodes_.push_back(Node{std::move(s), std::move(value), external, {}, std::move(fn), rg, -1});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::unordered_map<std::size_t, std::size_t> param_nodes_;
  const ParameterStore<T>* bound_store_ = nullptr;
  bool record_ = true;
};

}  // namespace comem

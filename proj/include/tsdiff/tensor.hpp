#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tsdiff/common.hpp"

namespace tsdiff {

// Thread-local switch disabling tape recording (used for model evaluation,
// sampling, and metric inference). RAII guard below.
namespace autograd {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
inline bool grad_enabled() { return grad_enabled_flag(); }
}  // namespace autograd

struct NoGradGuard {
  NoGradGuard() : prev_(autograd::grad_enabled_flag()) {
    autograd::grad_enabled_flag() = false;
  }
  ~NoGradGuard() { autograd::grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// One node of the dynamically recorded computation tape. The graph is the
// tape: every op allocates a node holding its output value, its parents and
// a closure that pulls this node's gradient into the parents' gradients.
template <typename S>
struct TensorNode {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // sized on demand, zeroed at the start of backward()
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;

  std::size_t size() const { return value.size(); }

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
  }
};

template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;

  Tensor(Shape shape, S fill) : node_(std::make_shared<TensorNode<S>>()) {
    node_->shape = std::move(shape);
    node_->value.assign(numel(node_->shape), fill);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), S(0)); }

  static Tensor from_data(Shape shape, std::vector<S> data) {
    if (numel(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.node_ = std::make_shared<TensorNode<S>>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    return t;
  }

  static Tensor scalar(S v) { return from_data({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }

  std::vector<S>& data() { return node_->value; }
  const std::vector<S>& data() const { return node_->value; }
  S* ptr() { return node_->value.data(); }
  const S* ptr() const { return node_->value.data(); }

  S item() const {
    if (size() != 1) {
      throw ShapeError("item() on non-scalar tensor of shape " +
                       shape_str(shape()));
    }
    return node_->value[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }

  Tensor& set_requires_grad(bool v = true) {
    node_->requires_grad = v;
    return *this;
  }

  std::vector<S>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<S>& grad() const { return node_->grad; }

  void zero_grad() {
    node_->grad.assign(node_->value.size(), S(0));
  }

  // Value copy with no tape history.
  Tensor detached() const {
    Tensor t = from_data(shape(), data());
    return t;
  }

  bool all_finite() const {
    for (S v : node_->value) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  std::shared_ptr<TensorNode<S>>& node() { return node_; }
  const std::shared_ptr<TensorNode<S>>& node() const { return node_; }

  // Reverse-mode sweep from this (scalar) tensor. Collects the reachable
  // graph, zero-initializes every gradient buffer in it, seeds d(self)/d(self)
  // = 1 and applies the recorded closures in reverse topological order.
  void backward() {
    if (!node_->requires_grad) {
      throw ConfigError("backward() on a tensor with requires_grad=false");
    }
    if (size() != 1) {
      throw ShapeError("backward() root must be scalar, got shape " +
                       shape_str(shape()));
    }
    std::vector<TensorNode<S>*> order;
    topo_sort(order);
    for (auto* n : order) {
      if (n->requires_grad) {
        n->grad.assign(n->value.size(), S(0));
      }
    }
    node_->grad[0] = S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backprop && (*it)->requires_grad) (*it)->backprop(**it);
    }
  }

 private:
  void topo_sort(std::vector<TensorNode<S>*>& order) const {
    // Iterative post-order DFS; recursion would overflow on long recurrent
    // chains (LSTM over hundreds of timesteps).
    std::unordered_set<TensorNode<S>*> visited;
    std::vector<std::pair<TensorNode<S>*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, child] = stack.back();
      if (child < n->parents.size()) {
        TensorNode<S>* p = n->parents[child].get();
        ++child;
        if (p->requires_grad && !visited.count(p)) {
          visited.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<TensorNode<S>> node_;
};

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;

}  // namespace tsdiff

#pragma once

#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "qsr/common.hpp"

namespace qsr::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + ")";
}

// When set, every op output and every gradient is checked for NaN/Inf.
inline bool& finite_checks() {
  static bool enabled = true;
  return enabled;
}

template <typename T>
void check_finite(std::span<const T> v, const char* where) {
  if (!finite_checks()) return;
  for (const T x : v)
    if (!std::isfinite(x)) throw NumericalError(std::string("non-finite value produced by ") + where);
}

// Graph recording switch. While disabled (inference), op results keep no
// parents and no backward closure.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // lazily allocated
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;  // reads self.grad, accumulates into parents

  bool is_leaf() const noexcept { return !backward; }

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

// Handle to a node of the differentiation graph. Copies share the node.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = ad::numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    const auto n = ad::numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, v), requires_grad);
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (ad::numel(shape) != values.size())
      throw ShapeError("Tensor: shape " + shape_str(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  // Result of an op. Parents and the backward closure are only retained
  // when some parent requires a gradient.
  static Tensor from_op(Shape shape, std::vector<T> values, const char* op,
                        std::vector<std::shared_ptr<Node<T>>> parents, std::function<void(Node<T>&)> backward) {
    check_finite<T>(values, op);
    Tensor t(std::move(shape), std::move(values));
    t.node_->op = op;
    bool any = false;
    if (grad_mode())
      for (const auto& p : parents) any = any || p->requires_grad;
    if (any) {
      t.node_->requires_grad = true;
      t.node_->parents = std::move(parents);
      t.node_->backward = std::move(backward);
    }
    return t;
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<T> values() { return node_->value; }
  std::span<const T> values() const { return node_->value; }
  std::vector<T>& data() { return node_->value; }
  const std::vector<T>& data() const { return node_->value; }
  T item() const {
    if (numel() != 1) throw InvalidArgument("Tensor::item on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  // Gradient buffer; zeros when no backward pass reached this tensor.
  std::span<const T> grad() const {
    if (node_->grad.empty()) node_->grad.assign(node_->value.size(), T(0));
    return node_->grad;
  }
  std::vector<T>& grad_buffer() { return node_->grad_buffer(); }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Reverse-mode accumulation from a scalar. Interior gradients are reset on
// every call; leaf gradients accumulate across calls.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw InvalidArgument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node<T>* n : order)
    if (!n->is_leaf()) n->grad.assign(n->value.size(), T(0));
  loss.node()->grad_buffer()[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->is_leaf()) continue;
    n->backward(*n);
  }
  if (finite_checks())
    for (Node<T>* n : order)
      if (n->is_leaf() && !n->grad.empty()) check_finite<T>(n->grad, "backward");
}

}  // namespace qsr::ad

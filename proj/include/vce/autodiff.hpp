#pragma once

// Tape-free reverse-mode differentiation. Every differentiable op returns a
// Var whose node remembers its parents and a closure that pushes the node's
// gradient back into them. backward() walks the recorded DAG in reverse
// topological order.
//
// Accumulation contract: leaf gradients (parameters, inputs created with
// requires_grad) accumulate across backward() calls until zero_grad();
// interior gradients are reset at the start of each call, so calling
// backward() twice on the same graph doubles every leaf gradient.

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vce/errors.hpp"
#include "vce/tensor.hpp"

namespace vce::nn {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }

  Tensor<T>& ensure_grad() {
    if (grad.numel() != value.numel()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <typename T>
class Var {
 public:
  using NodePtr = std::shared_ptr<Node<T>>;

  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  static Var constant(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    return Var(std::move(n));
  }

  // Leaf whose gradient is collected by backward().
  static Var leaf(Tensor<T> value) {
    auto v = constant(std::move(value));
    v.node_->requires_grad = true;
    return v;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_->requires_grad; }

  bool has_grad() const { return node_->grad.numel() == node_->value.numel(); }

  // Gradient of the leaf; zeros if backward never reached it.
  Tensor<T> grad() const { return has_grad() ? node_->grad : Tensor<T>(shape()); }

  void zero_grad() const {
    if (has_grad()) node_->grad.fill(T{0});
  }

  // Same values, cut from the graph.
  Var detach() const { return constant(node_->value); }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// Wraps a new op output. If no parent needs a gradient the node is a plain
// constant and drops its parents, so inference graphs free as they go.
template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> fn) {
  require_finite(value, "op output");
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p.requires_grad();
  if (n->requires_grad) {
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(fn);
  }
  return Var<T>(std::move(n));
}

// True when parent i of an op node collects a gradient.
template <typename T>
bool wants_grad(const Node<T>& self, std::size_t i) {
  return self.parents[i]->requires_grad;
}

template <typename T>
void backward(const Var<T>& loss) {
  if (!loss.defined()) throw UsageError("backward on an undefined Var");
  if (loss.numel() != 1) throw UsageError("backward requires a scalar loss");
  if (!loss.requires_grad()) {
    throw UsageError("backward on a Var with no recorded graph (nothing requires a gradient)");
  }

  // Iterative post-order DFS gives a topological order (parents first).
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

  for (Node<T>* n : order) {
    if (!n->is_leaf()) n->ensure_grad().fill(T{0});
  }
  loss.node()->ensure_grad()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->is_leaf()) continue;
    n->backward_fn(*n);
  }
  for (Node<T>* n : order) {
    if (n->is_leaf() && !n->grad.all_finite()) throw NumericError("non-finite gradient after backward");
  }
}

// A trainable tensor with value semantics: copying a Parameter copies its
// value (and gradient) into a fresh graph leaf, so model snapshots never alias.
template <typename T>
class Parameter {
 public:
  Parameter() : var_(Var<T>::leaf(Tensor<T>(Shape{1}))) {}
  explicit Parameter(Tensor<T> init) : var_(Var<T>::leaf(std::move(init))) {}

  Parameter(const Parameter& o) : var_(Var<T>::leaf(o.value())) {
    var_.node()->requires_grad = o.trainable();
    if (o.var_.has_grad()) var_.node()->grad = o.var_.node()->grad;
  }
  Parameter& operator=(const Parameter& o) {
    if (this != &o) *this = Parameter(o);
    return *this;
  }
  Parameter(Parameter&&) noexcept = default;
  Parameter& operator=(Parameter&&) noexcept = default;

  const Var<T>& var() const { return var_; }
  const Tensor<T>& value() const { return var_.node()->value; }
  // In-place updates are visible to any graph still holding this leaf.
  Tensor<T>& mutable_value() { return var_.node()->value; }
  const Shape& shape() const { return value().shape(); }
  std::size_t numel() const { return value().numel(); }

  bool has_grad() const { return var_.has_grad(); }
  const Tensor<T>& grad_ref() { return var_.node()->ensure_grad(); }
  Tensor<T> grad() const { return var_.grad(); }
  void zero_grad() { var_.zero_grad(); }

  bool trainable() const { return var_.node()->requires_grad; }
  // Takes effect for ops recorded after the call.
  void set_trainable(bool on) { var_.node()->requires_grad = on; }

 private:
  Var<T> var_;
};

}  // namespace vce::nn

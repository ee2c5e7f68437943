#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

#include "clinfuse/error.hpp"

namespace clinfuse {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

namespace detail {
inline thread_local bool grad_enabled = true;
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled; }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename Scalar>
struct TensorNode {
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  Shape shape;
  Vector value;
  Vector grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> inputs;
  // Reads this node's grad and accumulates into inputs that require grad.
  std::function<void(TensorNode&)> propagate;

  Vector& grad_buffer() {
    if (grad.size() != value.size()) grad = Vector::Zero(value.size());
    return grad;
  }
};

/// Dense row-major tensor handle. Copies share the underlying storage and
/// graph node; use detach() for an independent copy.
template <typename Scalar>
class BasicTensor {
  static_assert(std::is_floating_point_v<Scalar>, "tensor scalar must be floating point");

 public:
  using Node = TensorNode<Scalar>;
  using Vector = typename Node::Vector;
  using scalar_type = Scalar;

  BasicTensor() = default;

  BasicTensor(Shape shape, Vector values, bool requires_grad = false) {
    for (const Index d : shape) {
      if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape));
    }
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) + " does not match shape " +
                       shape_string(shape));
    }
    if (!values.allFinite()) throw NumericError("tensor data contains NaN or Inf");
    node_ = std::make_shared<Node>();
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    const Index n = checked_numel(shape);
    return BasicTensor(std::move(shape), Vector::Zero(n), requires_grad);
  }

  static BasicTensor constant(Shape shape, Scalar v, bool requires_grad = false) {
    const Index n = checked_numel(shape);
    return BasicTensor(std::move(shape), Vector::Constant(n, v), requires_grad);
  }

  static BasicTensor from(Shape shape, std::initializer_list<Scalar> values, bool requires_grad = false) {
    Vector v(static_cast<Index>(values.size()));
    Index i = 0;
    for (const Scalar x : values) v(i++) = x;
    return BasicTensor(std::move(shape), std::move(v), requires_grad);
  }

  static BasicTensor from(Shape shape, std::span<const Scalar> values, bool requires_grad = false) {
    Vector v = Eigen::Map<const Vector>(values.data(), static_cast<Index>(values.size()));
    return BasicTensor(std::move(shape), std::move(v), requires_grad);
  }

  /// Result of a recorded operation. Records inputs only when some input
  /// requires grad and recording is enabled on this thread.
  static BasicTensor result(Shape shape, Vector values, std::string_view op,
                            std::vector<std::shared_ptr<Node>> inputs,
                            std::function<void(Node&)> propagate) {
    BasicTensor out;
    out.node_ = std::make_shared<Node>();
    out.node_->shape = std::move(shape);
    out.node_->value = std::move(values);
    out.node_->op = op;
    bool any = false;
    for (const auto& in : inputs) any = any || (in && in->requires_grad);
    if (any && grad_enabled()) {
      out.node_->requires_grad = true;
      out.node_->inputs = std::move(inputs);
      out.node_->propagate = std::move(propagate);
    }
    return out;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  Index dim(std::size_t i) const { return node().shape.at(i); }
  Index numel() const { return node().value.size(); }

  const Vector& value() const { return node().value; }
  /// Direct storage access for leaves (parameter updates, perturbations).
  Vector& mutable_value() { return node().value; }
  const Scalar* data() const { return node().value.data(); }

  Scalar item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
    return node().value(0);
  }

  Scalar at(std::initializer_list<Index> idx) const { return node().value(offset(idx)); }

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool on) { node().requires_grad = on; }
  bool is_leaf() const { return node().inputs.empty(); }
  std::string_view op() const { return node().op; }

  bool has_grad() const { return node().grad.size() == node().value.size(); }
  /// Gradient, or zeros when nothing has flowed into this tensor yet.
  Vector grad() const { return has_grad() ? node().grad : Vector::Zero(numel()); }
  void zero_grad() { node().grad.resize(0); }

  BasicTensor detach() const { return BasicTensor(shape(), value(), false); }

  const std::shared_ptr<Node>& node_ptr() const { return node_; }

  Index offset(std::initializer_list<Index> idx) const {
    const Shape& s = shape();
    if (idx.size() != s.size()) throw ShapeError("index rank mismatch for shape " + shape_string(s));
    Index off = 0;
    std::size_t k = 0;
    for (const Index i : idx) {
      if (i < 0 || i >= s[k]) throw ShapeError("index out of range for shape " + shape_string(s));
      off = off * s[k] + i;
      ++k;
    }
    return off;
  }

 private:
  static Index checked_numel(const Shape& shape) {
    for (const Index d : shape) {
      if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape));
    }
    return shape_numel(shape);
  }

  Node& node() const {
    if (!node_) throw ShapeError("use of undefined tensor");
    return *node_;
  }

  std::shared_ptr<Node> node_;
};

using Tensor = BasicTensor<double>;

/// Topologically ordered list of the recorded operations reachable from a
/// root: every node appears after all of its inputs.
template <typename Scalar>
class ComputationRecord {
 public:
  using Node = TensorNode<Scalar>;

  static ComputationRecord trace(const BasicTensor<Scalar>& root) {
    ComputationRecord rec;
    const auto& start = root.node_ptr();
    if (!start || !start->requires_grad) return rec;
    std::unordered_set<const Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(start.get(), 0);
    visited.insert(start.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node* in = node->inputs[next++].get();
        if (in && in->requires_grad && visited.insert(in).second) stack.emplace_back(in, 0);
      } else {
        rec.order_.push_back(node);
        stack.pop_back();
      }
    }
    return rec;
  }

  std::span<Node* const> nodes() const { return order_; }
  std::size_t size() const { return order_.size(); }
  bool empty() const { return order_.empty(); }

  /// Seeds the root (last node) with a unit gradient and propagates in
  /// reverse. Leaf gradients accumulate; intermediate gradients are reset.
  void replay_backward() const {
    if (order_.empty()) return;
    for (Node* n : order_) {
      if (!n->inputs.empty()) n->grad.resize(0);
    }
    Node* root = order_.back();
    root->grad_buffer().array() += Scalar(1);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      Node* n = *it;
      if (n->propagate && n->grad.size() == n->value.size()) n->propagate(*n);
    }
  }

 private:
  std::vector<Node*> order_;
};

/// Populates grad on every requires_grad tensor the scalar loss depends on.
template <typename Scalar>
void backward(const BasicTensor<Scalar>& loss) {
  if (!loss.defined()) throw ShapeError("backward on undefined tensor");
  if (loss.numel() != 1) throw ShapeError("backward requires a scalar loss, got " + shape_string(loss.shape()));
  if (!loss.requires_grad() || loss.is_leaf()) {
    throw std::logic_error("backward on a tensor with no recorded provenance");
  }
  ComputationRecord<Scalar>::trace(loss).replay_backward();
}

}  // namespace clinfuse

// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors of doubles with a dynamic reverse-mode tape.
//
// A Tensor is a shared handle: copying a Tensor aliases the same storage,
// the way framework tensors behave. Use clone() for an independent copy.
// Every op that sees an input with requires_grad records a Node on the
// output; backward() topologically sorts the nodes reachable from a scalar
// loss and runs each node's pullback exactly once.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace tavat {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

struct TensorImpl;

/// One recorded operation. The pullback reads the output gradient and
/// accumulates into the gradients of inputs that require them.
struct Node {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(const std::vector<double>& out_grad)> pullback;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty when no gradient has been produced
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;  // null for leaves

  void accumulate_grad(std::size_t i, double g) {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    grad[i] += g;
  }
  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() : impl_(std::make_shared<TensorImpl>()) {}

  explicit Tensor(Shape shape, double fill = 0.0) : Tensor() {
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + to_string(shape));
    }
    impl_->data.assign(numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<double> data) : Tensor() {
    if (numel(shape) != data.size()) {
      throw ShapeError("tensor: shape " + to_string(shape) + " holds " +
                       std::to_string(numel(shape)) + " values, got " +
                       std::to_string(data.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  static Tensor from_impl(std::shared_ptr<TensorImpl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t size() const { return impl_->data.size(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  double& operator[](std::size_t i) { return impl_->data[i]; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double item() const {
    if (size() != 1) throw ShapeError("item: tensor has " + std::to_string(size()) + " elements");
    return impl_->data[0];
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> grad() { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return impl_->grad_fn == nullptr; }

  /// Deep copy of data, detached from any graph and without a gradient.
  Tensor clone() const {
    Tensor t(impl_->shape, impl_->data);
    return t;
  }
  /// Same storage values in a fresh leaf that does not require grad.
  Tensor detach() const { return clone(); }

  const TensorImpl* id() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Gradients produced by backward(), keyed by tensor identity.
class GradientMap {
 public:
  void insert(const Tensor& t) { entries_.emplace(t.id(), t); }
  bool contains(const Tensor& t) const { return entries_.count(t.id()) > 0; }
  std::span<const double> at(const Tensor& t) const {
    auto it = entries_.find(t.id());
    if (it == entries_.end()) throw GraphError("gradient map: tensor not reached by backward");
    return it->second.grad();
  }
  std::size_t size() const { return entries_.size(); }

 private:
  std::unordered_map<const TensorImpl*, Tensor> entries_;
};

namespace detail {

inline void check_finite(std::span<const double> values, const char* op, const char* what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      std::ostringstream os;
      os << op << ": non-finite " << what << " at flat index " << i << " (" << values[i] << ")";
      throw NonFiniteError(os.str());
    }
  }
}

/// Wraps freshly computed output data and, when any input needs a gradient,
/// attaches the pullback. The pullback receives the output gradient.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                          std::vector<Tensor> inputs,
                          std::function<void(const std::vector<double>&)> pullback) {
  check_finite(data, op, "output");
  Tensor out(std::move(shape), std::move(data));
  bool needs = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor& t) { return t.requires_grad(); });
  if (needs) {
    auto node = std::make_shared<Node>();
    node->op = op;
    for (auto& t : inputs) node->inputs.push_back(t.impl());
    node->pullback = std::move(pullback);
    out.impl()->grad_fn = std::move(node);
    out.set_requires_grad(true);
  }
  return out;
}

}  // namespace detail

/// Runs reverse-mode accumulation from a scalar loss. Leaf gradients
/// accumulate across calls until zero_grad(); intermediate gradients are
/// scratch and are released afterwards.
inline GradientMap backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw GraphError("backward: loss must be scalar, got shape " + to_string(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw GraphError("backward: loss is not connected to any tensor that requires grad");
  }

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<std::shared_ptr<TensorImpl>> order;
  std::unordered_set<const TensorImpl*> visited;
  std::vector<std::pair<std::shared_ptr<TensorImpl>, std::size_t>> stack;
  stack.emplace_back(loss.impl(), 0);
  visited.insert(loss.id());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto* fn = node->grad_fn.get();
    if (fn && next < fn->inputs.size()) {
      const auto& child = fn->inputs[next++];
      if (child->requires_grad && visited.insert(child.get()).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto& t : order) {
    if (t->grad_fn) t->grad.assign(t->data.size(), 0.0);
  }
  loss.impl()->grad_buffer()[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl& t = **it;
    if (t.grad_fn) t.grad_fn->pullback(t.grad);
  }

  GradientMap grads;
  for (auto& t : order) {
    if (t->grad_fn) {
      t->grad.clear();
      t->grad.shrink_to_fit();
    } else {
      detail::check_finite(t->grad, "backward", "gradient");
      grads.insert(Tensor::from_impl(t));
    }
  }
  return grads;
}

}  // namespace tavat

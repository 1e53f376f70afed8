#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "latentlens/error.hpp"
#include "latentlens/rng.hpp"

namespace latentlens {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Recording switch for the autodiff graph; thread-local so inference threads
/// never touch another thread's graph.
inline bool& grad_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_enabled()) { grad_enabled() = false; }
  ~NoGradGuard() { grad_enabled() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class S>
class BasicTensor;

namespace detail {

template <class S>
struct TensorImpl;

// One recorded op. The backward closure reads the output gradient and
// accumulates into the gradients of `inputs` that require grad.
template <class S>
struct Node {
  const char* kind = "";
  std::vector<std::shared_ptr<TensorImpl<S>>> inputs;
  std::function<void(const std::vector<S>&)> backward;
};

template <class S>
struct TensorImpl {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node<S>> grad_fn;

  std::vector<S>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), S(0));
    return grad;
  }
};

}  // namespace detail

/// Shared-handle n-d array. Copies alias the same storage; use clone() for a
/// deep copy. Ops only ever create new tensors; data changes in place only
/// through optimizer steps, initialization and normalization buffers.
template <class S>
class BasicTensor {
 public:
  using value_type = S;
  using Impl = detail::TensorImpl<S>;

  BasicTensor() = default;

  BasicTensor(Shape shape, std::vector<S> data) : impl_(std::make_shared<Impl>()) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
      throw Error(ErrorCategory::shape, "tensor: shape " + shape_str(shape) + " holds " +
                                            std::to_string(shape_numel(shape)) + " elements, got " +
                                            std::to_string(data.size()));
    }
    for (auto e : shape) {
      if (e <= 0) throw Error(ErrorCategory::shape, "tensor: non-positive extent in " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }

  static BasicTensor zeros(Shape shape) { return full(std::move(shape), S(0)); }

  static BasicTensor full(Shape shape, S value) {
    const auto n = static_cast<std::size_t>(shape_numel(shape));
    return BasicTensor(std::move(shape), std::vector<S>(n, value));
  }

  static BasicTensor scalar(S value) { return BasicTensor(Shape{}, std::vector<S>{value}); }

  static BasicTensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    std::vector<S> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<S>(rng.normal() * stddev);
    return BasicTensor(std::move(shape), std::move(v));
  }

  static BasicTensor uniform(Shape shape, Rng& rng, double lo, double hi) {
    std::vector<S> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<S>(rng.uniform(lo, hi));
    return BasicTensor(std::move(shape), std::move(v));
  }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const S> data() const { return impl_->data; }
  /// Writable view for leaf tensors (parameters, buffers, inputs).
  std::span<S> mutable_data() { return impl_->data; }
  const std::vector<S>& vec() const { return impl_->data; }

  S item() const {
    if (numel() != 1) throw Error(ErrorCategory::shape, "item: tensor has shape " + shape_str(shape()));
    return impl_->data[0];
  }
  S operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  BasicTensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return !impl_->grad_fn; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const S> grad() const { return impl_->grad; }
  std::span<S> mutable_grad() { return impl_->grad_buffer(); }
  void zero_grad() { impl_->grad.clear(); }

  /// Same values, no graph history, no grad.
  BasicTensor detach() const { return BasicTensor(shape(), impl_->data); }
  BasicTensor clone() const { return detach(); }

  std::shared_ptr<Impl> impl() const { return impl_; }
  explicit BasicTensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<Impl> impl_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

namespace detail {

template <class S>
bool any_requires_grad(std::initializer_list<const BasicTensor<S>*> inputs) {
  if (!grad_enabled()) return false;
  for (const auto* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

/// Wraps an op's output and, when any input takes part in differentiation,
/// attaches the node that propagates gradients back to those inputs.
template <class S>
BasicTensor<S> make_result(const char* kind, Shape shape, std::vector<S> data,
                           std::initializer_list<const BasicTensor<S>*> inputs,
                           std::function<void(const std::vector<S>&)> backward) {
  BasicTensor<S> out(std::move(shape), std::move(data));
  if (any_requires_grad<S>(inputs)) {
    auto node = std::make_shared<Node<S>>();
    node->kind = kind;
    for (const auto* t : inputs) {
      if (t && t->defined()) node->inputs.push_back(t->impl());
    }
    node->backward = std::move(backward);
    out.impl()->grad_fn = std::move(node);
    out.impl()->requires_grad = true;
  }
  return out;
}

template <class S>
bool needs_grad(const std::shared_ptr<TensorImpl<S>>& t) {
  return t && t->requires_grad;
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
/// calls; intermediate gradients are rebuilt on each call and released.
template <class S>
void backward(const BasicTensor<S>& loss) {
  using Impl = detail::TensorImpl<S>;
  if (loss.numel() != 1) {
    throw Error(ErrorCategory::shape, "backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  auto root = loss.impl();
  if (!root->requires_grad) throw Error(ErrorCategory::shape, "backward: loss does not require grad");

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<Impl*> order;
  std::unordered_set<Impl*> seen;
  std::vector<std::pair<Impl*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->grad_fn && next < node->grad_fn->inputs.size()) {
      Impl* child = node->grad_fn->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Impl* t : order) {
    if (t->grad_fn) t->grad.assign(t->data.size(), S(0));
  }
  root->grad_buffer()[0] += S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* t = *it;
    if (!t->grad_fn) continue;
    t->grad_fn->backward(t->grad);
    if (t != root.get()) {
      t->grad.clear();
      t->grad.shrink_to_fit();
    }
  }
}

}  // namespace latentlens

#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "roadseg/errors.hpp"

namespace roadseg {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

// Storage aligned to the widest SIMD width, so vectorized kernels peel the
// same way for equal shapes wherever the buffer was allocated.
template <class T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

template <class T>
struct TensorImpl;

/// One recorded operation: the inputs it read and how to push the output
/// gradient back into them.
template <class T>
struct Node {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  std::function<void(const TensorImpl<T>& out)> backward;
};

template <class T>
struct TensorImpl {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad; // empty until a gradient reaches this tensor
  bool requires_grad = false;
  std::shared_ptr<Node<T>> node; // null for leaves

  Buffer<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T{0});
    return grad;
  }
};

namespace detail {
inline thread_local bool grad_mode = true;
} // namespace detail

inline bool grad_enabled() { return detail::grad_mode; }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
  NoGradGuard() : previous_(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGradGuard() { detail::grad_mode = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
  bool previous_;
};

/// Shared handle to a dense row-major tensor. Copies alias the same storage.
template <class T>
class Tensor {
public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl<T>> impl) : impl_(std::move(impl)) {}

  static Tensor from_data(Shape shape, const std::vector<T>& data, bool requires_grad = false) {
    return adopt(std::move(shape), Buffer<T>(data.begin(), data.end()), requires_grad);
  }

  static Tensor adopt(Shape shape, Buffer<T> data, bool requires_grad = false) {
    for (auto d : shape)
      if (d <= 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
      throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                           std::to_string(data.size()) + " elements");
    auto impl = std::make_shared<TensorImpl<T>>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return adopt(std::move(shape), Buffer<T>(static_cast<std::size_t>(n > 0 ? n : 0), value), requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T{0}, requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) { return from_data({1}, {value}, requires_grad); }

  bool defined() const { return static_cast<bool>(impl_); }
  explicit operator bool() const { return defined(); }

  const Shape& shape() const { return impl_->shape; }
  std::int64_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  /// Direct write access; intended for leaves (parameters, buffers).
  std::span<T> mutable_data() const { return impl_->data; }
  std::vector<T> values() const { return {impl_->data.begin(), impl_->data.end()}; }
  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) const { impl_->requires_grad = on; }
  bool is_leaf() const { return !impl_->node; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() const { return impl_->ensure_grad(); }
  void zero_grad() const { impl_->grad.clear(); }

  const std::string& op_name() const {
    static const std::string leaf = "leaf";
    return impl_->node ? impl_->node->op : leaf;
  }

  /// Detached deep copy (no graph linkage, no gradient).
  Tensor clone() const { return adopt(shape(), impl_->data, false); }

  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

namespace detail {

/// Builds an op result and, when any input needs a gradient and recording
/// is on, links it into the graph.
template <class T, class Backward>
Tensor<T> make_result(std::string op, Shape shape, Buffer<T> data, std::vector<Tensor<T>> inputs,
                      Backward&& backward) {
  auto out = Tensor<T>::adopt(std::move(shape), std::move(data));
  if (!grad_mode) return out;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || (in.defined() && in.requires_grad());
  if (!needs) return out;
  auto node = std::make_shared<Node<T>>();
  node->op = std::move(op);
  for (const auto& in : inputs) node->inputs.push_back(in.impl());
  node->backward = std::forward<Backward>(backward);
  out.impl()->node = std::move(node);
  out.impl()->requires_grad = true;
  return out;
}

/// Gradient buffer of an input if it participates in differentiation, else null.
template <class T>
Buffer<T>* grad_slot(const std::shared_ptr<TensorImpl<T>>& t) {
  if (!t || !t->requires_grad) return nullptr;
  return &t->ensure_grad();
}

} // namespace detail

/// Reverse-mode sweep from a scalar. Leaves accumulate into their gradient;
/// the recorded graph is released afterwards.
template <class T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  if (!loss.requires_grad()) return;

  using Impl = TensorImpl<T>;
  std::vector<Impl*> order;
  std::unordered_set<Impl*> visited;
  // iterative post-order DFS
  std::vector<std::pair<Impl*, std::size_t>> stack{{loss.impl().get(), 0}};
  visited.insert(loss.impl().get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    if (impl->node && next < impl->node->inputs.size()) {
      Impl* child = impl->node->inputs[next++].get();
      if (child && child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(impl);
    stack.pop_back();
  }

  loss.impl()->ensure_grad()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* impl = *it;
    if (impl->node && !impl->grad.empty()) impl->node->backward(*impl);
  }
  for (Impl* impl : order) {
    if (impl->node) {
      impl->node.reset();
      impl->grad.clear();
      impl->grad.shrink_to_fit();
    }
  }
}

} // namespace roadseg

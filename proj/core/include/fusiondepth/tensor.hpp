#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fusiondepth/error.hpp"

namespace fusiondepth {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// NaN/Inf tripwire on every op output. On by default in debug builds.
bool finite_checks_enabled();
void set_finite_checks(bool enabled);

/// RAII toggle for the finite-value tripwire.
class FiniteChecks {
 public:
  explicit FiniteChecks(bool enabled) : previous_(finite_checks_enabled()) { set_finite_checks(enabled); }
  ~FiniteChecks() { set_finite_checks(previous_); }
  FiniteChecks(const FiniteChecks&) = delete;
  FiniteChecks& operator=(const FiniteChecks&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  bool leaf = true;
};

/// Row-major n-d array handle. Copies share storage; use clone() for a deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using ImplPtr = std::shared_ptr<TensorImpl<T>>;

  Tensor() = default;
  explicit Tensor(ImplPtr impl) : impl_(std::move(impl)) {}

  /// Every dimension must be >= 1.
  static Tensor full(Shape shape, T fill);
  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }
  static Tensor from_data(Shape shape, std::vector<T> values);
  static Tensor scalar(T value) { return full({1}, value); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const { return impl_->leaf; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<T> grad() { return impl_->grad; }
  std::span<const T> grad() const { return impl_->grad; }
  /// Resets accumulated gradient to zeros (keeps the buffer).
  void zero_grad();
  /// Drops the gradient buffer entirely.
  void clear_grad() { impl_->grad.clear(); }

  /// Deep copy with no gradient and no tape history.
  Tensor clone() const;
  /// Same values, cut off from the tape.
  Tensor detach() const { return clone(); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  const ImplPtr& impl() const { return impl_; }

 private:
  ImplPtr impl_;
};

/// Append-only record of differentiable operations.
///
/// Nodes are appended in execution order, so every node's inputs were either
/// leaves or outputs of earlier nodes.
template <typename T>
class Tape {
 public:
  using ImplPtr = std::shared_ptr<TensorImpl<T>>;
  using BackwardFn = std::function<void(std::span<const T> grad_out)>;

  struct Node {
    std::string op;
    std::vector<ImplPtr> inputs;
    ImplPtr output;
    BackwardFn backward;
  };

  void record(std::string op, std::vector<ImplPtr> inputs, ImplPtr output, BackwardFn backward);
  const std::vector<Node>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  /// Tape receiving operations on this thread, or null.
  static Tape* active();

 private:
  template <typename>
  friend class TapeScope;
  static void set_active(Tape* tape);

  std::vector<Node> nodes_;
};

/// Makes a tape the recording target for the enclosing scope.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(Tape<T>::active()) { Tape<T>::set_active(&tape); }
  ~TapeScope() { Tape<T>::set_active(previous_); }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Accumulates d(loss)/d(leaf) into every leaf that requires grad.
/// Intermediate gradients are reset on each call; leaf gradients accumulate.
template <typename T>
void backward(const Tensor<T>& loss, Tape<T>& tape);

template <typename T>
std::int64_t count_elements(std::span<const Tensor<T>> tensors) {
  std::int64_t total = 0;
  for (const auto& t : tensors) total += t.numel();
  return total;
}

}  // namespace fusiondepth

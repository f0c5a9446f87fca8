#include "fusiondepth/tensor.hpp"

#include <cmath>
#include <sstream>

namespace fusiondepth {

namespace {

#ifdef NDEBUG
bool g_finite_checks = false;
#else
bool g_finite_checks = true;
#endif

template <typename T>
Tape<T>*& active_slot() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw InvalidShape("tensor shape must have at least one dimension");
  for (auto d : shape) {
    if (d < 1) throw InvalidShape("tensor dimension must be >= 1, got shape " + shape_str(shape));
  }
}

template <typename T>
void check_values(std::span<const T> values, const char* where) {
  if (!g_finite_checks) return;
  for (T v : values) {
    if (!std::isfinite(v)) throw NonFinite(std::string(where) + ": non-finite value");
  }
}

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

bool finite_checks_enabled() { return g_finite_checks; }
void set_finite_checks(bool enabled) { g_finite_checks = enabled; }

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T fill) {
  validate_shape(shape);
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->data.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
  impl->shape = std::move(shape);
  check_values<T>(impl->data, "tensor_new");
  return Tensor(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::from_data(Shape shape, std::vector<T> values) {
  validate_shape(shape);
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeMismatch("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                        " values");
  }
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  check_values<T>(impl->data, "tensor_from_data");
  return Tensor(std::move(impl));
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw NotScalar("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag) {
  impl_->requires_grad = flag;
  return *this;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

template <typename T>
void Tape<T>::record(std::string op, std::vector<ImplPtr> inputs, ImplPtr output, BackwardFn backward) {
  nodes_.push_back(Node{std::move(op), std::move(inputs), std::move(output), std::move(backward)});
}

template <typename T>
Tape<T>* Tape<T>::active() {
  return active_slot<T>();
}

template <typename T>
void Tape<T>::set_active(Tape* tape) {
  active_slot<T>() = tape;
}

template <typename T>
void backward(const Tensor<T>& loss, Tape<T>& tape) {
  if (!loss.defined() || loss.numel() != 1) {
    throw NotScalar("backward() needs a scalar loss, got shape " +
                    (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  const auto& nodes = tape.nodes();
  std::size_t loss_index = nodes.size();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].output == loss.impl()) loss_index = i;
  }
  if (loss_index == nodes.size()) {
    if (loss.is_leaf() && loss.requires_grad()) {
      auto& g = loss.impl()->grad;
      if (g.empty()) g.assign(1, T(0));
      g[0] += T(1);
      return;
    }
    throw NotOnTape("backward(): loss was not produced on this tape");
  }

  for (std::size_t i = 0; i <= loss_index; ++i) nodes[i].output->grad.clear();
  loss.impl()->grad.assign(1, T(1));

  for (std::size_t i = loss_index + 1; i-- > 0;) {
    const auto& node = nodes[i];
    if (node.output->grad.empty()) continue;
    node.backward(node.output->grad);
  }
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template void backward<float>(const Tensor<float>&, Tape<float>&);
template void backward<double>(const Tensor<double>&, Tape<double>&);

}  // namespace fusiondepth

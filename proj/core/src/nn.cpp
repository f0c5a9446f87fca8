#include "fusiondepth/nn.hpp"

#include <cmath>

namespace fusiondepth {

namespace {

template <typename T>
void fill_uniform(Tensor<T>& t, double bound, Rng& rng) {
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
}

}  // namespace

template <typename T>
Conv2d<T>::Conv2d(int in_channels, int out_channels, int kernel, int stride_, int padding_, bool relu_)
    : weight(Tensor<T>::zeros({out_channels, in_channels, kernel, kernel})),
      bias(Tensor<T>::zeros({out_channels})),
      stride(stride_),
      padding(padding_),
      relu(relu_) {
  weight.set_requires_grad(true);
  bias.set_requires_grad(true);
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) const {
  auto y = conv2d(x, weight, bias, stride, padding);
  return relu ? fusiondepth::relu(y) : y;
}

template <typename T>
void Conv2d<T>::collect(const std::string& prefix, StateList<T>& out) const {
  out.params.push_back({prefix + ".weight", weight});
  out.params.push_back({prefix + ".bias", bias});
}

template <typename T>
double Conv2d<T>::fan_in() const {
  return static_cast<double>(in_channels()) * kernel() * kernel();
}

template <typename T>
TransConv2d<T>::TransConv2d(int in_channels, int out_channels, int kernel, int stride_)
    : weight(Tensor<T>::zeros({in_channels, out_channels, kernel, kernel})),
      bias(Tensor<T>::zeros({out_channels})),
      stride(stride_) {
  weight.set_requires_grad(true);
  bias.set_requires_grad(true);
}

template <typename T>
Tensor<T> TransConv2d<T>::forward(const Tensor<T>& x) const {
  return conv_transpose2d(x, weight, bias, stride, 0);
}

template <typename T>
void TransConv2d<T>::collect(const std::string& prefix, StateList<T>& out) const {
  out.params.push_back({prefix + ".weight", weight});
  out.params.push_back({prefix + ".bias", bias});
}

template <typename T>
double TransConv2d<T>::fan_in() const {
  const double taps = std::max(1.0, static_cast<double>(kernel()) / stride);
  return in_channels() * taps * taps;
}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(int channels, double eps_, double momentum_)
    : gamma(Tensor<T>::full({channels}, T(1))),
      beta(Tensor<T>::zeros({channels})),
      running_mean(Tensor<T>::zeros({channels})),
      running_var(Tensor<T>::full({channels}, T(1))),
      eps(eps_),
      momentum(momentum_) {
  gamma.set_requires_grad(true);
  beta.set_requires_grad(true);
}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x, bool training) {
  return batch_norm(x, gamma, beta, running_mean, running_var, BatchNormOptions{training, momentum, eps});
}

template <typename T>
void BatchNorm2d<T>::collect(const std::string& prefix, StateList<T>& out) const {
  out.params.push_back({prefix + ".gamma", gamma});
  out.params.push_back({prefix + ".beta", beta});
  out.buffers.push_back({prefix + ".running_mean", running_mean});
  out.buffers.push_back({prefix + ".running_var", running_var});
}

template <typename T>
void init_params(Conv2d<T>& layer, Rng& rng) {
  fill_uniform(layer.weight, init_bound(layer.fan_in()), rng);
  std::fill(layer.bias.data().begin(), layer.bias.data().end(), T(0));
}

template <typename T>
void init_params(TransConv2d<T>& layer, Rng& rng) {
  fill_uniform(layer.weight, init_bound(layer.fan_in()), rng);
  std::fill(layer.bias.data().begin(), layer.bias.data().end(), T(0));
}

template class Conv2d<float>;
template class Conv2d<double>;
template class TransConv2d<float>;
template class TransConv2d<double>;
template class BatchNorm2d<float>;
template class BatchNorm2d<double>;
template void init_params<float>(Conv2d<float>&, Rng&);
template void init_params<double>(Conv2d<double>&, Rng&);
template void init_params<float>(TransConv2d<float>&, Rng&);
template void init_params<double>(TransConv2d<double>&, Rng&);

}  // namespace fusiondepth

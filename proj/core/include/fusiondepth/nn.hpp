#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "fusiondepth/ops.hpp"
#include "fusiondepth/rng.hpp"
#include "fusiondepth/tensor.hpp"

namespace fusiondepth {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

/// Learnable parameters and non-learnable buffers of a module tree.
template <typename T>
struct StateList {
  std::vector<NamedTensor<T>> params;
  std::vector<NamedTensor<T>> buffers;
};

/// 2-D convolution with optional fused ReLU (mirrors "Conv/Relu" rows).
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding, bool relu);

  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(const std::string& prefix, StateList<T>& out) const;

  int in_channels() const { return static_cast<int>(weight.dim(1)); }
  int out_channels() const { return static_cast<int>(weight.dim(0)); }
  int kernel() const { return static_cast<int>(weight.dim(2)); }
  /// Fan-in used by the initializer: in_channels * kernel^2.
  double fan_in() const;

  Tensor<T> weight;  // [out, in, k, k]
  Tensor<T> bias;    // [out]
  int stride = 1;
  int padding = 0;
  bool relu = false;
};

/// Transposed convolution; 2x2 kernel with stride 2 doubles spatial size.
template <typename T>
class TransConv2d {
 public:
  TransConv2d() = default;
  TransConv2d(int in_channels, int out_channels, int kernel, int stride);

  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(const std::string& prefix, StateList<T>& out) const;

  int in_channels() const { return static_cast<int>(weight.dim(0)); }
  int out_channels() const { return static_cast<int>(weight.dim(1)); }
  int kernel() const { return static_cast<int>(weight.dim(2)); }
  /// Inputs contributing to each output pixel: in_channels * (kernel/stride)^2.
  double fan_in() const;

  Tensor<T> weight;  // [in, out, k, k]
  Tensor<T> bias;    // [out]
  int stride = 2;
};

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels, double eps = 1e-5, double momentum = 0.1);

  /// Mutates the running statistics when `training`.
  Tensor<T> forward(const Tensor<T>& x, bool training);
  void collect(const std::string& prefix, StateList<T>& out) const;

  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double eps = 1e-5;
  double momentum = 0.1;
};

/// Fan-in scaled uniform init: weights ~ U(-b, b), b = sqrt(3 / fan_in); bias 0.
template <typename T>
void init_params(Conv2d<T>& layer, Rng& rng);
template <typename T>
void init_params(TransConv2d<T>& layer, Rng& rng);

/// sqrt(3 / fan_in): the bound used by init_params.
inline double init_bound(double fan_in) { return std::sqrt(3.0 / fan_in); }

template <typename T>
std::int64_t count_params(const std::vector<NamedTensor<T>>& params) {
  std::int64_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

}  // namespace fusiondepth

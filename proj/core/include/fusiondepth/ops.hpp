#pragma once

#include <utility>
#include <vector>

#include "fusiondepth/tensor.hpp"

namespace fusiondepth {

// Every op below records itself on the active tape when at least one input
// requires a gradient. Image tensors are laid out [N, C, H, W].

enum class ElementwiseOp { add, sub, mul, div, exp, abs, square };

/// Binary ops take equal shapes, or a single-element operand broadcast against
/// the other. Unary ops ignore `b`.
template <typename T>
Tensor<T> elementwise(ElementwiseOp op, const Tensor<T>& a, const Tensor<T>& b = {});

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> exp(const Tensor<T>& a);
template <typename T> Tensor<T> abs(const Tensor<T>& a);
template <typename T> Tensor<T> square(const Tensor<T>& a);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> mul_scalar(const Tensor<T>& a, T s);

template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> reduce_mean(const Tensor<T>& a);
/// sum(a * mask) / sum(mask). Mask entries must be 0 or 1; masked-out entries
/// are skipped entirely and receive exactly zero gradient.
template <typename T> Tensor<T> reduce_mean(const Tensor<T>& a, const Tensor<T>& mask);

template <typename T> Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts);
template <typename T> Tensor<T> slice_channels(const Tensor<T>& x, std::int64_t begin, std::int64_t count);
/// Zero-pads the bottom and right edges.
template <typename T> Tensor<T> pad_bottom_right(const Tensor<T>& x, std::int64_t rows, std::int64_t cols);
/// Keeps the top-left rows x cols window.
template <typename T> Tensor<T> crop_top_left(const Tensor<T>& x, std::int64_t rows, std::int64_t cols);

/// Cross-correlation. weight [O, C, kh, kw], bias [O] (may be undefined).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride, int padding);

/// Transposed convolution (adjoint of conv2d). weight [C, O, kh, kw].
/// Output size (H - 1) * stride - 2 * padding + kh.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                           int padding);

struct BatchNormOptions {
  bool training = true;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel batch normalization. In training mode the running statistics
/// are updated in place (unbiased variance), and the batch statistics are used.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                     Tensor<T>& running_var, const BatchNormOptions& options);

/// Two-way softmax per element: wx = e^x / (e^x + e^y), wy = 1 - wx.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> softmax_pair(const Tensor<T>& x, const Tensor<T>& y);

/// Confidence-weighted late fusion of two depth predictions:
/// (e^X d_global + e^Y d_local) / (e^X + e^Y), clamped to [min, max] of the two.
template <typename T>
Tensor<T> confidence_fuse(const Tensor<T>& d_global, const Tensor<T>& d_local, const Tensor<T>& conf_global,
                          const Tensor<T>& conf_local);

}  // namespace fusiondepth

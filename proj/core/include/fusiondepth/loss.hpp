#pragma once

#include <cstdint>
#include <span>

#include "fusiondepth/ops.hpp"
#include "fusiondepth/raster.hpp"

namespace fusiondepth {

/// Weights of the global, local and fused terms of the composite objective.
struct LossWeights {
  double global = 0.1;
  double local = 0.1;
  double out = 1.0;
};

/// How the focal factor (1 + 0.05 * epoch * |y - y_hat|) is differentiated.
enum class FocalGradient {
  detached,  // factor treated as a constant per-pixel weight
  full,      // gradient also flows through |y - y_hat| inside the factor
};

/// Squared error masked to valid pixels: sum(mask * (pred - target)^2) / sum(mask).
template <typename T>
Tensor<T> masked_mse(const Tensor<T>& pred, const Tensor<T>& target, const Tensor<T>& mask);

/// Focal MSE: mean over masked pixels of (1 + 0.05 * epoch * |err|) * err^2.
/// `epoch` is 0-based, so the first epoch is plain MSE.
template <typename T>
Tensor<T> focal_mse(const Tensor<T>& pred, const Tensor<T>& target, const Tensor<T>& mask, int epoch,
                    FocalGradient mode = FocalGradient::detached);

/// w.global * L(d_global) + w.local * L(d_local) + w.out * L(d_out), L = focal_mse.
template <typename T>
Tensor<T> composite_loss(const Tensor<T>& d_out, const Tensor<T>& d_global, const Tensor<T>& d_local,
                         const Tensor<T>& target, const Tensor<T>& mask, int epoch, const LossWeights& weights,
                         FocalGradient mode = FocalGradient::detached);

/// Depth error summary in millimetres over the masked pixels.
struct DepthMetrics {
  double rmse_mm = 0.0;
  double mae_mm = 0.0;
  std::int64_t valid_pixels = 0;
};

/// Metric inputs are metres; results are millimetres. Throws EmptyMask.
DepthMetrics depth_metrics(std::span<const double> pred, std::span<const double> target,
                           std::span<const std::uint8_t> mask);
double rmse_mm(const DepthMap& pred, const DepthMap& target, const BinaryMask& mask);
double mae_mm(const DepthMap& pred, const DepthMap& target, const BinaryMask& mask);

/// Running pooled metrics over many samples (pixel-weighted).
class MetricAccumulator {
 public:
  void add(std::span<const double> pred, std::span<const double> target, std::span<const std::uint8_t> mask);
  std::int64_t valid_pixels() const { return count_; }
  /// Throws EmptyMask if nothing was accumulated.
  DepthMetrics result() const;

 private:
  double sum_sq_ = 0.0;
  double sum_abs_ = 0.0;
  std::int64_t count_ = 0;
};

}  // namespace fusiondepth

#include "fusiondepth/loss.hpp"

#include <cmath>

namespace fusiondepth {

template <typename T>
Tensor<T> masked_mse(const Tensor<T>& pred, const Tensor<T>& target, const Tensor<T>& mask) {
  return reduce_mean(square(sub(pred, target)), mask);
}

template <typename T>
Tensor<T> focal_mse(const Tensor<T>& pred, const Tensor<T>& target, const Tensor<T>& mask, int epoch,
                    FocalGradient mode) {
  if (epoch < 0) throw ConfigError("focal_mse: epoch must be >= 0");
  if (pred.shape() != target.shape()) {
    throw ShapeMismatch("focal_mse: prediction " + shape_str(pred.shape()) + " vs target " +
                        shape_str(target.shape()));
  }
  const T coef = static_cast<T>(0.05 * epoch);
  const auto err = sub(pred, target);
  const auto sq = square(err);
  Tensor<T> focal;
  if (mode == FocalGradient::full) {
    focal = add_scalar(mul_scalar(abs(err), coef), T(1));
  } else {
    std::vector<T> w(err.data().begin(), err.data().end());
    for (auto& v : w) v = T(1) + coef * std::abs(v);
    focal = Tensor<T>::from_data(err.shape(), std::move(w));
  }
  return reduce_mean(mul(focal, sq), mask);
}

template <typename T>
Tensor<T> composite_loss(const Tensor<T>& d_out, const Tensor<T>& d_global, const Tensor<T>& d_local,
                         const Tensor<T>& target, const Tensor<T>& mask, int epoch, const LossWeights& weights,
                         FocalGradient mode) {
  Tensor<T> total;
  const auto accumulate = [&](const Tensor<T>& pred, double w) {
    if (w == 0.0) return;
    if (!pred.defined()) throw ShapeMismatch("composite_loss: missing prediction for a weighted term");
    auto term = mul_scalar(focal_mse(pred, target, mask, epoch, mode), static_cast<T>(w));
    total = total.defined() ? add(total, term) : term;
  };
  accumulate(d_global, weights.global);
  accumulate(d_local, weights.local);
  accumulate(d_out, weights.out);
  if (!total.defined()) throw ConfigError("composite_loss: all loss weights are zero");
  return total;
}

DepthMetrics depth_metrics(std::span<const double> pred, std::span<const double> target,
                           std::span<const std::uint8_t> mask) {
  MetricAccumulator acc;
  acc.add(pred, target, mask);
  return acc.result();
}

double rmse_mm(const DepthMap& pred, const DepthMap& target, const BinaryMask& mask) {
  return depth_metrics(pred.values, target.values, mask.values).rmse_mm;
}

double mae_mm(const DepthMap& pred, const DepthMap& target, const BinaryMask& mask) {
  return depth_metrics(pred.values, target.values, mask.values).mae_mm;
}

void MetricAccumulator::add(std::span<const double> pred, std::span<const double> target,
                            std::span<const std::uint8_t> mask) {
  if (pred.size() != target.size() || pred.size() != mask.size()) {
    throw ShapeMismatch("depth metrics: prediction, target and mask sizes differ");
  }
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!mask[i]) continue;
    const double e = (pred[i] - target[i]) * 1000.0;
    sum_sq_ += e * e;
    sum_abs_ += std::abs(e);
    ++count_;
  }
}

DepthMetrics MetricAccumulator::result() const {
  if (count_ == 0) throw EmptyMask("depth metrics: no valid pixels");
  const auto n = static_cast<double>(count_);
  return DepthMetrics{std::sqrt(sum_sq_ / n), sum_abs_ / n, count_};
}

#define FUSIONDEPTH_INSTANTIATE_LOSS(T)                                                                         \
  template Tensor<T> masked_mse<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> focal_mse<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, FocalGradient);    \
  template Tensor<T> composite_loss<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                       const Tensor<T>&, int, const LossWeights&, FocalGradient);

FUSIONDEPTH_INSTANTIATE_LOSS(float)
FUSIONDEPTH_INSTANTIATE_LOSS(double)

#undef FUSIONDEPTH_INSTANTIATE_LOSS

}  // namespace fusiondepth

#pragma once

#include <cstdint>
#include <vector>

#include "fusiondepth/error.hpp"

namespace fusiondepth {

/// Row-major single-channel image.
template <typename V>
struct Raster {
  int rows = 0;
  int cols = 0;
  std::vector<V> values;

  Raster() = default;
  Raster(int rows_, int cols_, V fill = V{})
      : rows(rows_), cols(cols_), values(static_cast<std::size_t>(rows_) * cols_, fill) {}

  V& at(int r, int c) { return values[static_cast<std::size_t>(r) * cols + c]; }
  const V& at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }
  std::size_t size() const { return values.size(); }
  bool same_size(int r, int c) const { return rows == r && cols == c; }

  friend bool operator==(const Raster&, const Raster&) = default;
};

/// Depth in metres; 0 means "no measurement".
using DepthMap = Raster<double>;
/// 1 marks a selected pixel.
using BinaryMask = Raster<std::uint8_t>;

/// Planar RGB, values in [0, 1], layout [3][rows][cols].
struct RgbImage {
  int rows = 0;
  int cols = 0;
  std::vector<double> values;

  RgbImage() = default;
  RgbImage(int rows_, int cols_) : rows(rows_), cols(cols_), values(3 * static_cast<std::size_t>(rows_) * cols_, 0.0) {}

  double& at(int channel, int r, int c) {
    return values[(static_cast<std::size_t>(channel) * rows + r) * cols + c];
  }
  double at(int channel, int r, int c) const {
    return values[(static_cast<std::size_t>(channel) * rows + r) * cols + c];
  }

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

/// Mask of pixels carrying a (positive) value.
inline BinaryMask valid_mask(const DepthMap& map) {
  BinaryMask mask(map.rows, map.cols, 0);
  for (std::size_t i = 0; i < map.size(); ++i) mask.values[i] = map.values[i] > 0.0 ? 1 : 0;
  return mask;
}

inline double fill_ratio(const DepthMap& map) {
  if (map.size() == 0) return 0.0;
  std::size_t n = 0;
  for (double v : map.values) n += v > 0.0 ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(map.size());
}

}  // namespace fusiondepth

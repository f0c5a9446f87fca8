#pragma once

#include <optional>
#include <string>

#include "fusiondepth/raster.hpp"

namespace fusiondepth {

/// One aligned training/evaluation frame. Synthetic frames carry the dense
/// truth and the artifact mask; real KITTI frames do not.
struct SceneSample {
  std::string id;
  RgbImage rgb;
  DepthMap lidar;
  DepthMap gt;
  std::optional<DepthMap> dense_truth;
  std::optional<BinaryMask> artifact_mask;

  int rows() const { return lidar.rows; }
  int cols() const { return lidar.cols; }

  friend bool operator==(const SceneSample&, const SceneSample&) = default;
};

}  // namespace fusiondepth

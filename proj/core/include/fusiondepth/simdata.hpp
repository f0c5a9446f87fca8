#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "fusiondepth/raster.hpp"
#include "fusiondepth/sample.hpp"

namespace fusiondepth {

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

/// Camera frame: x right, y down, z forward (optical axis). Depth is z.
struct Plane {
  Vec3 point;
  Vec3 normal;
  Vec3 albedo{0.5, 0.5, 0.5};
};

/// Axis-aligned box.
struct Box {
  Vec3 center;
  Vec3 half_extents;
  Vec3 albedo{0.5, 0.5, 0.5};
};

struct Sphere {
  Vec3 center;
  double radius = 1.0;
  Vec3 albedo{0.5, 0.5, 0.5};
};

using Primitive = std::variant<Plane, Box, Sphere>;

struct ScanlineConfig {
  int lines = 16;
  /// Fraction of the image height above the first scan line (sky region).
  double top_skip = 0.2;
  int col_step = 2;
  /// Probability of dropping an individual return.
  double dropout = 0.6;
  /// Per-return vertical jitter in rows, uniform in [-row_jitter, row_jitter].
  int row_jitter = 1;
};

struct ArtifactConfig {
  int count = 4;
  double min_offset = 1.0;  // metres
  double max_offset = 5.0;
  int min_diameter = 5;  // pixels
  int max_diameter = 20;
  /// Draw the sign of each blob's offset at random; otherwise offsets are positive.
  bool random_sign = true;
};

struct SceneSpec {
  std::uint64_t seed = 1;
  int rows = 64;
  int cols = 192;
  /// Focal length and principal point in pixels; non-positive values select
  /// defaults derived from the image size.
  double focal = 0.0;
  double cx = -1.0;
  double cy = -1.0;
  bool ground = true;
  double camera_height = 1.65;
  double ground_extent = 85.0;
  Vec3 ground_albedo{0.42, 0.42, 0.45};
  /// Fronto-parallel backdrop plane distance; 0 disables it.
  double backdrop_distance = 70.0;
  Vec3 backdrop_albedo{0.55, 0.7, 0.85};
  std::vector<Primitive> primitives;
  ArtifactConfig artifacts;
  ScanlineConfig scanlines;
  double gt_fill_target = 0.3;
  /// Period (rows) of the ground-truth density modulation.
  int gt_row_period = 8;

  double focal_px() const { return focal > 0.0 ? focal : 0.58 * cols; }
  double cx_px() const { return cx >= 0.0 ? cx : 0.5 * cols; }
  double cy_px() const { return cy >= 0.0 ? cy : 0.15 * rows; }
};

inline constexpr double kMinSceneDepth = 0.5;
inline constexpr double kMaxSceneDepth = 85.0;

/// Rounds a depth to the 1/256 m grid of the KITTI depth format.
double quantize_depth(double metres);

struct RenderResult {
  RgbImage rgb;
  DepthMap dense_truth;
};

/// Pinhole ray cast, Lambert shading. Throws InvalidScene for primitives
/// behind the camera, uncovered pixels, or depths outside (0.5, 85) m.
RenderResult render_scene(const SceneSpec& spec);

DepthMap sample_lidar(const DepthMap& dense_truth, const ScanlineConfig& config, std::uint64_t seed);

struct ArtifactResult {
  DepthMap lidar;
  BinaryMask mask;
};

/// Shifts sampled returns inside random blobs by a per-blob depth offset.
ArtifactResult inject_artifacts(const DepthMap& lidar, const DepthMap& dense_truth, const ArtifactConfig& config,
                                std::uint64_t seed);

/// Keeps a random, row-modulated subset of the true depth.
DepthMap make_gt(const DepthMap& dense_truth, double fill_target, std::uint64_t seed, int row_period = 8);

/// Fills `primitives` of a copy of `base` with a random street-like layout.
SceneSpec random_scene(const SceneSpec& base, std::uint64_t seed);

/// Renders and post-processes one spec into a complete sample.
SceneSample make_sample(const SceneSpec& spec, std::string id = {});

struct CorpusStats {
  int count = 0;
  int train = 0;
  int val = 0;
  double mean_lidar_fill = 0.0;
  double mean_gt_fill = 0.0;
  std::int64_t artifact_pixels = 0;
};

/// Writes `count` random samples plus manifest.txt under `out_dir`. The last
/// round(count * val_fraction) ids form the validation split.
CorpusStats generate_corpus(int count, const SceneSpec& base, std::uint64_t seed,
                            const std::filesystem::path& out_dir, double val_fraction = 0.2);

std::string sample_id(int index);

}  // namespace fusiondepth

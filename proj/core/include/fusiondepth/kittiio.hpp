#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "fusiondepth/raster.hpp"
#include "fusiondepth/sample.hpp"

namespace fusiondepth {

/// Largest depth representable in a 16-bit KITTI PNG (65535 / 256).
inline constexpr double kMaxPngDepth = 65535.0 / 256.0;

/// 16-bit grayscale PNG, metres = value / 256, 0 = no measurement.
DepthMap read_depth_png(const std::filesystem::path& path);
/// Stores round(metres * 256); values <= 0 become 0. Throws RangeError above kMaxPngDepth.
void write_depth_png(const DepthMap& map, const std::filesystem::path& path);

/// 8-bit PNG (gray, RGB or RGBA; alpha dropped) or binary PPM (P6, maxval 255).
RgbImage read_rgb(const std::filesystem::path& path);
/// 8-bit RGB PNG; channel values are rounded to the nearest of 256 levels.
void write_rgb_png(const RgbImage& image, const std::filesystem::path& path);

/// 8-bit grayscale PNG, 0 / 255.
BinaryMask read_mask_png(const std::filesystem::path& path);
void write_mask_png(const BinaryMask& mask, const std::filesystem::path& path);

struct ManifestEntry {
  std::string id;
  std::string split;
};

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& root);
void write_manifest(const std::filesystem::path& root, const std::vector<ManifestEntry>& entries);
std::vector<std::string> manifest_ids(const std::filesystem::path& root, const std::string& split);

/// Files of one sample: <root>/{rgb,lidar,gt,dense,artifact}/<id>.png.
/// rgb may also be <id>.ppm. dense and artifact are optional.
struct SamplePaths {
  std::filesystem::path rgb, lidar, gt, dense, artifact;
};
SamplePaths sample_paths(const std::filesystem::path& root, const std::string& id);

void write_sample(const std::filesystem::path& root, const SceneSample& sample);

/// Loads one sample. With crop_rows > 0, every modality keeps its bottom
/// crop_rows rows. Throws AlignmentError if the modalities differ in size.
SceneSample read_sample(const std::filesystem::path& root, const std::string& id, int crop_rows = 0);

/// Keeps the bottom `rows` rows.
DepthMap crop_bottom(const DepthMap& map, int rows);
RgbImage crop_bottom(const RgbImage& image, int rows);
BinaryMask crop_bottom(const BinaryMask& mask, int rows);

struct ColorScale {
  double min_depth = 0.0;
  double max_depth = 80.0;
};

/// RGB triple of the depth palette for t in [0, 1].
std::array<std::uint8_t, 3> palette_color(double t);

/// Colour-mapped 8-bit RGB PNG; invalid (<= 0) pixels are black. The scale
/// is stored in tEXt chunks "depth_min_m" and "depth_max_m".
void export_visualization(const DepthMap& map, const std::filesystem::path& path, const ColorScale& scale = {});

/// Reads the tEXt key/value pairs of a PNG.
std::vector<std::pair<std::string, std::string>> read_png_text(const std::filesystem::path& path);

}  // namespace fusiondepth

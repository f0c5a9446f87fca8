#include "fusiondepth/kittiio.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

#include "fusiondepth/error.hpp"

namespace fusiondepth {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) {
    throw IoError(std::string(mode[0] == 'r' ? "cannot open " : "cannot create ") + path.string());
  }
  return f;
}

struct PngErrorState {
  std::jmp_buf jump;
  char message[256] = {};
};

void png_error_handler(png_structp png, png_const_charp msg) {
  auto* state = static_cast<PngErrorState*>(png_get_error_ptr(png));
  std::snprintf(state->message, sizeof state->message, "%s", msg);
  std::longjmp(state->jump, 1);
}

void png_warning_handler(png_structp, png_const_charp) {}

/// Decoded 8- or 16-bit image with samples in native order.
struct PngImage {
  int width = 0;
  int height = 0;
  int bit_depth = 0;
  int color_type = 0;
  int channels = 0;
  std::vector<std::uint16_t> samples;
  std::vector<std::pair<std::string, std::string>> text;
};

struct ReadBuffers {
  std::vector<png_byte> bytes;
  std::vector<png_bytep> rows;
};

// Runs the libpng calls that may longjmp. Only trivially destructible locals
// live in this frame; the buffers are owned by the caller.
bool decode_png(std::FILE* file, PngErrorState& state, PngImage& image, ReadBuffers& buffers, bool expand) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &state, png_error_handler, png_warning_handler);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    return false;
  }
  if (setjmp(state.jump)) {
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  png_init_io(png, file);
  png_read_info(png, info);
  png_uint_32 width = 0;
  png_uint_32 height = 0;
  int bit_depth = 0;
  int color_type = 0;
  png_get_IHDR(png, info, &width, &height, &bit_depth, &color_type, nullptr, nullptr, nullptr);
  image.width = static_cast<int>(width);
  image.height = static_cast<int>(height);
  image.bit_depth = bit_depth;
  image.color_type = color_type;
  if (expand) {
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (bit_depth == 16) png_set_strip_16(png);
  }
  png_set_interlace_handling(png);
  png_read_update_info(png, info);
  const auto rowbytes = png_get_rowbytes(png, info);
  image.channels = png_get_channels(png, info);
  buffers.bytes.resize(rowbytes * height);
  buffers.rows.resize(height);
  for (png_uint_32 r = 0; r < height; ++r) buffers.rows[r] = buffers.bytes.data() + r * rowbytes;
  png_read_image(png, buffers.rows.data());
  png_read_end(png, info);
  png_textp text = nullptr;
  int num_text = 0;
  png_get_text(png, info, &text, &num_text);
  for (int i = 0; i < num_text; ++i) image.text.emplace_back(text[i].key, text[i].text ? text[i].text : "");
  image.bit_depth = expand ? 8 : bit_depth;
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

PngImage read_png(const std::filesystem::path& path, bool expand) {
  auto file = open_file(path, "rb");
  png_byte signature[8] = {};
  if (std::fread(signature, 1, 8, file.get()) != 8 || png_sig_cmp(signature, 0, 8) != 0) {
    throw FormatError(path.string() + ": not a PNG file");
  }
  std::rewind(file.get());
  PngErrorState state;
  PngImage image;
  ReadBuffers buffers;
  if (!decode_png(file.get(), state, image, buffers, expand)) {
    throw FormatError(path.string() + ": " + (state.message[0] ? state.message : "libpng initialisation failed"));
  }
  const std::size_t count = static_cast<std::size_t>(image.width) * image.height * image.channels;
  image.samples.resize(count);
  if (image.bit_depth == 16) {
    for (std::size_t i = 0; i < count; ++i) {
      image.samples[i] = static_cast<std::uint16_t>((buffers.bytes[2 * i] << 8) | buffers.bytes[2 * i + 1]);
    }
  } else if (image.bit_depth == 8) {
    std::copy(buffers.bytes.begin(), buffers.bytes.begin() + static_cast<std::ptrdiff_t>(count), image.samples.begin());
  } else {
    throw FormatError(path.string() + ": unsupported bit depth " + std::to_string(image.bit_depth));
  }
  return image;
}

struct WriteSpec {
  int width;
  int height;
  int bit_depth;
  int color_type;
  png_bytepp rows;
  png_textp text;
  int num_text;
};

bool encode_png(std::FILE* file, PngErrorState& state, const WriteSpec& spec) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &state, png_error_handler, png_warning_handler);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    return false;
  }
  if (setjmp(state.jump)) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_init_io(png, file);
  png_set_IHDR(png, info, static_cast<png_uint_32>(spec.width), static_cast<png_uint_32>(spec.height), spec.bit_depth,
               spec.color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  if (spec.num_text > 0) png_set_text(png, info, spec.text, spec.num_text);
  png_write_info(png, info);
  png_write_image(png, spec.rows);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

void write_png(const std::filesystem::path& path, int width, int height, int bit_depth, int color_type,
               std::vector<png_byte>& bytes, const std::vector<std::pair<std::string, std::string>>& text = {}) {
  const std::size_t rowbytes = bytes.size() / static_cast<std::size_t>(height);
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  for (int r = 0; r < height; ++r) rows[static_cast<std::size_t>(r)] = bytes.data() + r * rowbytes;
  std::vector<png_text> entries(text.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    entries[i].compression = PNG_TEXT_COMPRESSION_NONE;
    entries[i].key = const_cast<char*>(text[i].first.c_str());
    entries[i].text = const_cast<char*>(text[i].second.c_str());
    entries[i].text_length = text[i].second.size();
  }
  auto file = open_file(path, "wb");
  PngErrorState state;
  const WriteSpec spec{width, height, bit_depth, color_type, rows.data(), entries.data(),
                       static_cast<int>(entries.size())};
  if (!encode_png(file.get(), state, spec)) {
    throw IoError(path.string() + ": " + (state.message[0] ? state.message : "libpng initialisation failed"));
  }
  if (std::fflush(file.get()) != 0) throw IoError("write failed: " + path.string());
}

void require_nonempty(int rows, int cols, const std::filesystem::path& path) {
  if (rows < 1 || cols < 1) throw FormatError("cannot write an empty image to " + path.string());
}

RgbImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P6") throw FormatError(path.string() + ": only binary PPM (P6) is supported");
  int values[3] = {};
  for (int& v : values) {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string comment;
      std::getline(in, comment);
      in >> std::ws;
    }
    if (!(in >> v)) throw FormatError(path.string() + ": malformed PPM header");
  }
  const int cols = values[0];
  const int rows = values[1];
  if (cols < 1 || rows < 1 || values[2] != 255) throw FormatError(path.string() + ": unsupported PPM dimensions or maxval");
  in.get();
  std::vector<unsigned char> bytes(static_cast<std::size_t>(rows) * cols * 3);
  if (!in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()))) {
    throw FormatError(path.string() + ": truncated PPM data");
  }
  RgbImage image(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      for (int ch = 0; ch < 3; ++ch) image.at(ch, r, c) = bytes[(static_cast<std::size_t>(r) * cols + c) * 3 + ch] / 255.0;
    }
  }
  return image;
}

template <typename Image>
Image crop_rows_of(const Image& image, int rows, int planes) {
  if (rows < 1 || rows > image.rows) {
    throw ConfigError("crop: cannot keep " + std::to_string(rows) + " of " + std::to_string(image.rows) + " rows");
  }
  Image out;
  out.rows = rows;
  out.cols = image.cols;
  out.values.resize(static_cast<std::size_t>(planes) * rows * image.cols);
  const int skip = image.rows - rows;
  for (int p = 0; p < planes; ++p) {
    const auto src = image.values.begin() + (static_cast<std::ptrdiff_t>(p) * image.rows + skip) * image.cols;
    std::copy(src, src + static_cast<std::ptrdiff_t>(rows) * image.cols,
              out.values.begin() + static_cast<std::ptrdiff_t>(p) * rows * image.cols);
  }
  return out;
}

}  // namespace

DepthMap read_depth_png(const std::filesystem::path& path) {
  const auto image = read_png(path, false);
  if (image.bit_depth != 16 || image.color_type != PNG_COLOR_TYPE_GRAY) {
    throw FormatError(path.string() + ": expected a 16-bit single-channel PNG (bit depth " +
                      std::to_string(image.bit_depth) + ", colour type " + std::to_string(image.color_type) + ")");
  }
  DepthMap map(image.height, image.width, 0.0);
  for (std::size_t i = 0; i < map.size(); ++i) map.values[i] = image.samples[i] / 256.0;
  return map;
}

void write_depth_png(const DepthMap& map, const std::filesystem::path& path) {
  require_nonempty(map.rows, map.cols, path);
  std::vector<png_byte> bytes(map.size() * 2);
  for (std::size_t i = 0; i < map.size(); ++i) {
    const double v = map.values[i];
    if (std::isnan(v)) throw RangeError("write_depth_png: NaN depth at index " + std::to_string(i));
    if (v > kMaxPngDepth) {
      throw RangeError("write_depth_png: depth " + std::to_string(v) + " m exceeds " + std::to_string(kMaxPngDepth));
    }
    const auto stored = v <= 0.0 ? 0u : static_cast<unsigned>(std::lround(v * 256.0));
    bytes[2 * i] = static_cast<png_byte>(stored >> 8);
    bytes[2 * i + 1] = static_cast<png_byte>(stored & 0xFF);
  }
  write_png(path, map.cols, map.rows, 16, PNG_COLOR_TYPE_GRAY, bytes);
}

RgbImage read_rgb(const std::filesystem::path& path) {
  if (path.extension() == ".ppm") return read_ppm(path);
  const auto image = read_png(path, true);
  RgbImage out(image.height, image.width);
  const int ch = image.channels;
  for (int r = 0; r < image.height; ++r) {
    for (int c = 0; c < image.width; ++c) {
      const std::size_t base = (static_cast<std::size_t>(r) * image.width + c) * ch;
      for (int k = 0; k < 3; ++k) {
        const int src = ch >= 3 ? k : 0;
        out.at(k, r, c) = image.samples[base + src] / 255.0;
      }
    }
  }
  return out;
}

void write_rgb_png(const RgbImage& image, const std::filesystem::path& path) {
  require_nonempty(image.rows, image.cols, path);
  std::vector<png_byte> bytes(static_cast<std::size_t>(image.rows) * image.cols * 3);
  for (int r = 0; r < image.rows; ++r) {
    for (int c = 0; c < image.cols; ++c) {
      for (int k = 0; k < 3; ++k) {
        const double v = std::clamp(image.at(k, r, c), 0.0, 1.0);
        bytes[(static_cast<std::size_t>(r) * image.cols + c) * 3 + k] = static_cast<png_byte>(std::lround(v * 255.0));
      }
    }
  }
  write_png(path, image.cols, image.rows, 8, PNG_COLOR_TYPE_RGB, bytes);
}

BinaryMask read_mask_png(const std::filesystem::path& path) {
  const auto image = read_png(path, true);
  if (image.channels != 1) throw FormatError(path.string() + ": expected a single-channel mask");
  BinaryMask mask(image.height, image.width, 0);
  for (std::size_t i = 0; i < mask.size(); ++i) mask.values[i] = image.samples[i] != 0 ? 1 : 0;
  return mask;
}

void write_mask_png(const BinaryMask& mask, const std::filesystem::path& path) {
  require_nonempty(mask.rows, mask.cols, path);
  std::vector<png_byte> bytes(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) bytes[i] = mask.values[i] ? 255 : 0;
  write_png(path, mask.cols, mask.rows, 8, PNG_COLOR_TYPE_GRAY, bytes);
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& root) {
  const auto path = root / "manifest.txt";
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<ManifestEntry> entries;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream fields(line);
    ManifestEntry e;
    if (!(fields >> e.id)) continue;
    if (!(fields >> e.split)) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": missing split");
    entries.push_back(std::move(e));
  }
  return entries;
}

void write_manifest(const std::filesystem::path& root, const std::vector<ManifestEntry>& entries) {
  const auto path = root / "manifest.txt";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot create " + path.string());
  for (const auto& e : entries) out << e.id << ' ' << e.split << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<std::string> manifest_ids(const std::filesystem::path& root, const std::string& split) {
  std::vector<std::string> ids;
  for (const auto& e : read_manifest(root)) {
    if (split.empty() || split == "all" || e.split == split) ids.push_back(e.id);
  }
  return ids;
}

SamplePaths sample_paths(const std::filesystem::path& root, const std::string& id) {
  const auto file = id + ".png";
  SamplePaths p{root / "rgb" / file, root / "lidar" / file, root / "gt" / file, root / "dense" / file,
                root / "artifact" / file};
  if (!std::filesystem::exists(p.rgb) && std::filesystem::exists(root / "rgb" / (id + ".ppm"))) {
    p.rgb = root / "rgb" / (id + ".ppm");
  }
  return p;
}

void write_sample(const std::filesystem::path& root, const SceneSample& sample) {
  for (const char* sub : {"rgb", "lidar", "gt", "dense", "artifact"}) {
    std::error_code ec;
    std::filesystem::create_directories(root / sub, ec);
    if (ec) throw IoError("cannot create directory " + (root / sub).string() + ": " + ec.message());
  }
  const auto p = sample_paths(root, sample.id);
  write_rgb_png(sample.rgb, p.rgb);
  write_depth_png(sample.lidar, p.lidar);
  write_depth_png(sample.gt, p.gt);
  if (sample.dense_truth) write_depth_png(*sample.dense_truth, p.dense);
  if (sample.artifact_mask) write_mask_png(*sample.artifact_mask, p.artifact);
}

DepthMap crop_bottom(const DepthMap& map, int rows) { return crop_rows_of(map, rows, 1); }
RgbImage crop_bottom(const RgbImage& image, int rows) { return crop_rows_of(image, rows, 3); }
BinaryMask crop_bottom(const BinaryMask& mask, int rows) { return crop_rows_of(mask, rows, 1); }

SceneSample read_sample(const std::filesystem::path& root, const std::string& id, int crop_rows) {
  const auto p = sample_paths(root, id);
  SceneSample s;
  s.id = id;
  s.rgb = read_rgb(p.rgb);
  s.lidar = read_depth_png(p.lidar);
  s.gt = read_depth_png(p.gt);
  if (std::filesystem::exists(p.dense)) s.dense_truth = read_depth_png(p.dense);
  if (std::filesystem::exists(p.artifact)) s.artifact_mask = read_mask_png(p.artifact);

  const auto check = [&](int rows, int cols, const char* what) {
    if (rows != s.lidar.rows || cols != s.lidar.cols) {
      throw AlignmentError("sample " + id + ": " + what + " is " + std::to_string(rows) + "x" + std::to_string(cols) +
                           " but lidar is " + std::to_string(s.lidar.rows) + "x" + std::to_string(s.lidar.cols));
    }
  };
  check(s.rgb.rows, s.rgb.cols, "rgb");
  check(s.gt.rows, s.gt.cols, "gt");
  if (s.dense_truth) check(s.dense_truth->rows, s.dense_truth->cols, "dense truth");
  if (s.artifact_mask) check(s.artifact_mask->rows, s.artifact_mask->cols, "artifact mask");

  if (crop_rows > 0 && crop_rows != s.lidar.rows) {
    s.rgb = crop_bottom(s.rgb, crop_rows);
    s.lidar = crop_bottom(s.lidar, crop_rows);
    s.gt = crop_bottom(s.gt, crop_rows);
    if (s.dense_truth) s.dense_truth = crop_bottom(*s.dense_truth, crop_rows);
    if (s.artifact_mask) s.artifact_mask = crop_bottom(*s.artifact_mask, crop_rows);
  }
  return s;
}

std::array<std::uint8_t, 3> palette_color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const auto ramp = [](double x) { return std::clamp(1.5 - std::abs(4.0 * x), 0.0, 1.0); };
  const auto to_byte = [](double v) { return static_cast<std::uint8_t>(std::lround(v * 255.0)); };
  return {to_byte(ramp(t - 0.75)), to_byte(ramp(t - 0.5)), to_byte(ramp(t - 0.25))};
}

void export_visualization(const DepthMap& map, const std::filesystem::path& path, const ColorScale& scale) {
  require_nonempty(map.rows, map.cols, path);
  if (!(scale.max_depth > scale.min_depth)) throw ConfigError("export_visualization: max depth must exceed min depth");
  std::vector<png_byte> bytes(map.size() * 3, 0);
  const double span = scale.max_depth - scale.min_depth;
  for (std::size_t i = 0; i < map.size(); ++i) {
    const double v = map.values[i];
    if (!(v > 0.0)) continue;
    const auto rgb = palette_color((v - scale.min_depth) / span);
    std::copy(rgb.begin(), rgb.end(), bytes.begin() + static_cast<std::ptrdiff_t>(3 * i));
  }
  char lo[32];
  char hi[32];
  std::snprintf(lo, sizeof lo, "%.6g", scale.min_depth);
  std::snprintf(hi, sizeof hi, "%.6g", scale.max_depth);
  write_png(path, map.cols, map.rows, 8, PNG_COLOR_TYPE_RGB, bytes, {{"depth_min_m", lo}, {"depth_max_m", hi}});
}

std::vector<std::pair<std::string, std::string>> read_png_text(const std::filesystem::path& path) {
  return read_png(path, true).text;
}

}  // namespace fusiondepth

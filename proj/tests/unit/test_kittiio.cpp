#include <doctest.h>

#include <cstdio>
#include <map>

#include <png.h>

#include "fusiondepth/kittiio.hpp"
#include "fusiondepth/simdata.hpp"
#include "helpers.hpp"

using namespace fusiondepth;

namespace {

/// Raw 16-bit sample at (r, c), decoded with libpng directly.
std::uint16_t stored_value(const std::filesystem::path& path, int r, int c) {
  FILE* f = std::fopen(path.string().c_str(), "rb");
  REQUIRE(f != nullptr);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  png_init_io(png, f);
  png_read_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
  REQUIRE(png_get_bit_depth(png, info) == 16);
  REQUIRE(png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY);
  png_bytepp rows = png_get_rows(png, info);
  const png_bytep px = rows[r] + 2 * c;
  const auto value = static_cast<std::uint16_t>((px[0] << 8) | px[1]);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(f);
  return value;
}

}  // namespace

TEST_SUITE("kittiio") {
  TEST_CASE("depth PNG round trip is exact on the 1/256 m grid") {
    testing::TempDir dir("depth");
    Rng rng(31);
    DepthMap m(7, 11);
    for (auto& v : m.values) v = rng.bernoulli(0.3) ? 0.0 : static_cast<double>(rng.uniform_int(1, 65535)) / 256.0;
    m.at(0, 0) = kMaxPngDepth;
    write_depth_png(m, dir / "d.png");
    CHECK(read_depth_png(dir / "d.png") == m);
  }

  TEST_CASE("100 m is stored as 25600") {
    testing::TempDir dir("hundred");
    DepthMap m(1, 2, 0.0);
    m.at(0, 1) = 100.0;
    write_depth_png(m, dir / "d.png");
    CHECK(stored_value(dir / "d.png", 0, 1) == 25600);
    CHECK(stored_value(dir / "d.png", 0, 0) == 0);
    CHECK(read_depth_png(dir / "d.png").at(0, 1) == 100.0);
  }

  TEST_CASE("depth writer rejects out-of-range values and rounds to the grid") {
    testing::TempDir dir("range");
    DepthMap big(1, 1, 300.0);
    CHECK_THROWS_AS(write_depth_png(big, dir / "a.png"), RangeError);
    DepthMap nan(1, 1, std::nan(""));
    CHECK_THROWS_AS(write_depth_png(nan, dir / "b.png"), RangeError);
    DepthMap neg(1, 2, -3.0);
    neg.at(0, 1) = 1.0 + 1.0 / 1024.0;
    write_depth_png(neg, dir / "c.png");
    const auto back = read_depth_png(dir / "c.png");
    CHECK(back.at(0, 0) == 0.0);
    CHECK(back.at(0, 1) == 1.0);
  }

  TEST_CASE("malformed or mistyped files are rejected") {
    testing::TempDir dir("bad");
    testing::write_file(dir / "text.png", "this is not a png");
    CHECK_THROWS_AS(read_depth_png(dir / "text.png"), FormatError);
    RgbImage img(2, 3);
    write_rgb_png(img, dir / "rgb.png");
    CHECK_THROWS_AS(read_depth_png(dir / "rgb.png"), FormatError);
    DepthMap m(4, 4, 5.0);
    write_depth_png(m, dir / "ok.png");
    auto bytes = testing::read_file(dir / "ok.png");
    testing::write_file(dir / "truncated.png", bytes.substr(0, bytes.size() / 2));
    CHECK_THROWS_AS(read_depth_png(dir / "truncated.png"), FormatError);
    CHECK_THROWS_AS(read_depth_png(dir / "missing.png"), IoError);
  }

  TEST_CASE("rgb PNG and PPM inputs") {
    testing::TempDir dir("rgb");
    RgbImage img(3, 4);
    for (std::size_t i = 0; i < img.values.size(); ++i) img.values[i] = static_cast<double>(i % 256) / 255.0;
    write_rgb_png(img, dir / "a.png");
    CHECK(read_rgb(dir / "a.png") == img);

    std::string ppm = "P6\n# comment\n2 1\n255\n";
    ppm += std::string{'\xff', '\x00', '\x80', '\x00', '\xff', '\x00'};
    testing::write_file(dir / "b.ppm", ppm);
    const auto p = read_rgb(dir / "b.ppm");
    CHECK(p.rows == 1);
    CHECK(p.cols == 2);
    CHECK(p.at(0, 0, 0) == 1.0);
    CHECK(p.at(2, 0, 0) == doctest::Approx(128.0 / 255.0));
    CHECK(p.at(1, 0, 1) == 1.0);
  }

  TEST_CASE("mask round trip") {
    testing::TempDir dir("mask");
    BinaryMask m(2, 3, 0);
    m.at(1, 2) = 1;
    write_mask_png(m, dir / "m.png");
    CHECK(read_mask_png(dir / "m.png") == m);
  }

  TEST_CASE("manifest and sample round trip") {
    testing::TempDir dir("sample");
    SceneSpec spec = random_scene(SceneSpec{}, 3);
    const auto s = make_sample(spec, "000042");
    write_sample(dir.path(), s);
    write_manifest(dir.path(), {{"000042", "train"}, {"000043", "val"}});
    CHECK(manifest_ids(dir.path(), "train") == std::vector<std::string>{"000042"});
    CHECK(manifest_ids(dir.path(), "all").size() == 2);
    const auto back = read_sample(dir.path(), "000042");
    CHECK(back == s);
  }

  TEST_CASE("bottom crop and alignment errors") {
    testing::TempDir dir("crop");
    const auto s = make_sample(random_scene(SceneSpec{}, 4), "x");
    write_sample(dir.path(), s);
    const auto cropped = read_sample(dir.path(), "x", 48);
    CHECK(cropped.rows() == 48);
    CHECK(cropped.lidar.at(0, 5) == s.lidar.at(16, 5));
    CHECK(cropped.dense_truth->at(47, 100) == s.dense_truth->at(63, 100));
    CHECK_THROWS_AS(crop_bottom(s.lidar, 65), ConfigError);

    write_depth_png(crop_bottom(s.lidar, 10), sample_paths(dir.path(), "x").lidar);
    CHECK_THROWS_AS(read_sample(dir.path(), "x"), AlignmentError);
  }

  TEST_CASE("visualization palette and metadata") {
    testing::TempDir dir("vis");
    DepthMap m(2, 2, 0.0);
    m.at(0, 1) = 10.0;
    m.at(1, 0) = 80.0;
    export_visualization(m, dir / "v.png", ColorScale{0.0, 80.0});
    const auto img = read_rgb(dir / "v.png");
    CHECK(img.at(0, 0, 0) == 0.0);
    CHECK(img.at(1, 0, 0) == 0.0);
    CHECK(img.at(2, 0, 0) == 0.0);
    CHECK(img.at(0, 0, 1) + img.at(1, 0, 1) + img.at(2, 0, 1) > 0.0);
    std::map<std::string, std::string> text;
    for (const auto& [k, v] : read_png_text(dir / "v.png")) text[k] = v;
    CHECK(text.count("depth_min_m") == 1);
    CHECK(std::stod(text["depth_max_m"]) == 80.0);
    CHECK(palette_color(0.0) != palette_color(1.0));
  }
}

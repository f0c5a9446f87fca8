#include <doctest.h>

#include <cmath>

#include "fusiondepth/kittiio.hpp"
#include "fusiondepth/simdata.hpp"
#include "helpers.hpp"

using namespace fusiondepth;

namespace {

SceneSpec wall_scene(double distance) {
  SceneSpec s;
  s.rows = 16;
  s.cols = 48;
  s.ground = false;
  s.backdrop_distance = 0.0;
  s.primitives.push_back(Plane{{0.0, 0.0, distance}, {0.0, 0.0, -1.0}});
  return s;
}

std::size_t count_nonzero(const DepthMap& m) {
  std::size_t n = 0;
  for (double v : m.values) n += v > 0.0;
  return n;
}

}  // namespace

TEST_SUITE("simdata") {
  TEST_CASE("fronto-parallel wall renders a constant depth") {
    const auto r = render_scene(wall_scene(10.0));
    REQUIRE(r.dense_truth.rows == 16);
    for (double v : r.dense_truth.values) CHECK(v == 10.0);
    for (double v : r.rgb.values) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }

  TEST_CASE("a sphere occludes the wall behind it") {
    auto spec = wall_scene(20.0);
    spec.primitives.push_back(Sphere{{0.0, 0.0, 8.0}, 1.5});
    const auto r = render_scene(spec);
    const int cr = static_cast<int>(spec.cy_px()), cc = static_cast<int>(spec.cx_px());
    CHECK(r.dense_truth.at(cr, cc) < 20.0);
    CHECK(r.dense_truth.at(cr, cc) == doctest::Approx(6.5).epsilon(0.02));
    CHECK(r.dense_truth.at(15, 0) == 20.0);
  }

  TEST_CASE("object boundaries are visible in the colour image") {
    auto spec = wall_scene(20.0);
    spec.primitives.push_back(Box{{0.0, 0.0, 8.0}, {1.0, 1.0, 0.5}, {0.9, 0.1, 0.1}});
    const auto r = render_scene(spec);
    const int cr = static_cast<int>(spec.cy_px()), cc = static_cast<int>(spec.cx_px());
    CHECK(r.dense_truth.at(cr, cc) < 20.0);
    CHECK(r.rgb.at(0, cr, cc) != r.rgb.at(0, 15, 0));
  }

  TEST_CASE("invalid scenes are rejected") {
    auto behind = wall_scene(10.0);
    behind.primitives.push_back(Sphere{{0.0, 0.0, -5.0}, 1.0});
    CHECK_THROWS_AS(render_scene(behind), InvalidScene);
    auto empty = wall_scene(10.0);
    empty.primitives.clear();
    CHECK_THROWS_AS(render_scene(empty), InvalidScene);
    CHECK_THROWS_AS(render_scene(wall_scene(90.0)), InvalidScene);
  }

  TEST_CASE("rendering and sampling are deterministic") {
    const auto spec = random_scene(SceneSpec{}, 5);
    CHECK(make_sample(spec, "a") == make_sample(spec, "a"));
    CHECK_FALSE(make_sample(random_scene(SceneSpec{}, 6)).lidar == make_sample(spec).lidar);
  }

  TEST_CASE("dense scanlines without dropout reproduce the depth map") {
    const auto dense = render_scene(random_scene(SceneSpec{}, 9)).dense_truth;
    ScanlineConfig full{dense.rows, 0.0, 1, 0.0, 0};
    CHECK(sample_lidar(dense, full, 1) == dense);
  }

  TEST_CASE("default lidar fill ratio stays within 3 to 7 percent") {
    double lo = 1.0, hi = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const auto spec = random_scene(SceneSpec{}, seed);
      const auto dense = render_scene(spec).dense_truth;
      const auto lidar = sample_lidar(dense, spec.scanlines, seed);
      const double f = fill_ratio(lidar);
      lo = std::min(lo, f);
      hi = std::max(hi, f);
      for (std::size_t i = 0; i < lidar.size(); ++i) {
        if (lidar.values[i] != 0.0) REQUIRE(lidar.values[i] == dense.values[i]);
      }
    }
    CHECK(lo >= 0.03);
    CHECK(hi <= 0.07);
  }

  TEST_CASE("artifacts: controlled offset, subset of sampled pixels, empty for zero magnitude") {
    const auto spec = random_scene(SceneSpec{}, 10);
    const auto dense = render_scene(spec).dense_truth;
    const auto lidar = sample_lidar(dense, spec.scanlines, 3);

    ArtifactConfig none = spec.artifacts;
    none.min_offset = none.max_offset = 0.0;
    const auto clean = inject_artifacts(lidar, dense, none, 4);
    CHECK(clean.lidar == lidar);
    CHECK(std::count(clean.mask.values.begin(), clean.mask.values.end(), 1) == 0);

    ArtifactConfig one{1, 2.0, 2.0, 9, 9, false};
    const auto shifted = inject_artifacts(lidar, dense, one, 5);
    std::size_t marked = 0;
    for (std::size_t i = 0; i < lidar.size(); ++i) {
      if (shifted.mask.values[i]) {
        ++marked;
        CHECK(lidar.values[i] > 0.0);
        CHECK(shifted.lidar.values[i] - dense.values[i] == 2.0);
      } else {
        CHECK(shifted.lidar.values[i] == lidar.values[i]);
      }
    }
    CHECK(marked > 0);
  }

  TEST_CASE("sample invariants over many seeds") {
    double gt_lo = 1.0, gt_hi = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const auto s = make_sample(random_scene(SceneSpec{}, seed));
      REQUIRE(s.dense_truth);
      REQUIRE(s.artifact_mask);
      const auto& dense = *s.dense_truth;
      for (std::size_t i = 0; i < dense.size(); ++i) {
        REQUIRE(dense.values[i] > kMinSceneDepth);
        REQUIRE(dense.values[i] < kMaxSceneDepth);
        if (s.artifact_mask->values[i]) {
          REQUIRE(s.lidar.values[i] != dense.values[i]);
        } else if (s.lidar.values[i] != 0.0) {
          REQUIRE(s.lidar.values[i] == dense.values[i]);
        }
        REQUIRE((s.gt.values[i] == 0.0 || s.gt.values[i] == dense.values[i]));
      }
      const double f = fill_ratio(s.gt);
      gt_lo = std::min(gt_lo, f);
      gt_hi = std::max(gt_hi, f);
    }
    CHECK(gt_lo >= 0.25);
    CHECK(gt_hi <= 0.35);
  }

  TEST_CASE("ground truth at full fill equals the dense depth") {
    const auto dense = render_scene(random_scene(SceneSpec{}, 2)).dense_truth;
    CHECK(make_gt(dense, 1.0, 7) == dense);
    const auto sparse = make_gt(dense, 0.3, 7);
    CHECK(count_nonzero(sparse) < dense.size());
  }

  TEST_CASE("depth quantization grid") {
    CHECK(quantize_depth(100.0) == 100.0);
    CHECK(quantize_depth(1.0 + 1.0 / 1024.0) == 1.0);
    CHECK(quantize_depth(1.0 + 3.0 / 1024.0) == 1.0 + 1.0 / 256.0);
  }

  TEST_CASE("corpus: ids, split, files and byte-identical regeneration") {
    testing::TempDir a("corpus_a"), b("corpus_b");
    SceneSpec base;
    base.rows = 32;
    base.cols = 96;
    const auto stats = generate_corpus(10, base, 7, a.path());
    CHECK(stats.count == 10);
    CHECK(stats.train == 8);
    CHECK(stats.val == 2);
    const auto entries = read_manifest(a.path());
    REQUIRE(entries.size() == 10);
    CHECK(entries[0].id == sample_id(0));
    CHECK(entries[9].split == "val");
    for (const auto& e : entries) {
      const auto p = sample_paths(a.path(), e.id);
      CHECK(std::filesystem::exists(p.rgb));
      CHECK(std::filesystem::exists(p.lidar));
      CHECK(std::filesystem::exists(p.gt));
      CHECK(std::filesystem::exists(p.dense));
      CHECK(std::filesystem::exists(p.artifact));
    }
    generate_corpus(10, base, 7, b.path());
    for (const auto& entry : std::filesystem::recursive_directory_iterator(a.path())) {
      if (!entry.is_regular_file()) continue;
      const auto rel = std::filesystem::relative(entry.path(), a.path());
      CHECK(testing::read_file(entry.path()) == testing::read_file(b.path() / rel));
    }
    CHECK_THROWS_AS(generate_corpus(0, base, 7, a.path()), ConfigError);
  }
}

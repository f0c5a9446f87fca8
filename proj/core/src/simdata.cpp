#include "fusiondepth/simdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>

#include "fusiondepth/error.hpp"
#include "fusiondepth/kittiio.hpp"
#include "fusiondepth/rng.hpp"

namespace fusiondepth {

namespace {

Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
Vec3 normalized(Vec3 a) {
  const double n = std::sqrt(dot(a, a));
  return (1.0 / n) * a;
}

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  Vec3 normal;
  Vec3 albedo;
};

std::optional<Hit> intersect(const Plane& p, Vec3 dir) {
  const double denom = dot(dir, p.normal);
  if (denom == 0.0) return std::nullopt;
  const double t = dot(p.point, p.normal) / denom;
  if (!(t > 0.0)) return std::nullopt;
  return Hit{t, p.normal, p.albedo};
}

std::optional<Hit> intersect(const Box& b, Vec3 dir) {
  const double lo[3] = {b.center.x - b.half_extents.x, b.center.y - b.half_extents.y, b.center.z - b.half_extents.z};
  const double hi[3] = {b.center.x + b.half_extents.x, b.center.y + b.half_extents.y, b.center.z + b.half_extents.z};
  const double d[3] = {dir.x, dir.y, dir.z};
  double t_near = -std::numeric_limits<double>::infinity();
  double t_far = std::numeric_limits<double>::infinity();
  int axis = -1;
  double sign = 0.0;
  for (int a = 0; a < 3; ++a) {
    if (d[a] == 0.0) {
      if (0.0 < lo[a] || 0.0 > hi[a]) return std::nullopt;
      continue;
    }
    double t0 = lo[a] / d[a];
    double t1 = hi[a] / d[a];
    double s = -1.0;
    if (t0 > t1) {
      std::swap(t0, t1);
      s = 1.0;
    }
    if (t0 > t_near) {
      t_near = t0;
      axis = a;
      sign = s;
    }
    t_far = std::min(t_far, t1);
  }
  if (axis < 0 || t_near > t_far || !(t_near > 0.0)) return std::nullopt;
  Vec3 n;
  (axis == 0 ? n.x : axis == 1 ? n.y : n.z) = sign;
  return Hit{t_near, n, b.albedo};
}

std::optional<Hit> intersect(const Sphere& s, Vec3 dir) {
  const double a = dot(dir, dir);
  const double b = -2.0 * dot(dir, s.center);
  const double c = dot(s.center, s.center) - s.radius * s.radius;
  const double disc = b * b - 4.0 * a * c;
  if (disc < 0.0) return std::nullopt;
  const double t = (-b - std::sqrt(disc)) / (2.0 * a);
  if (!(t > 0.0)) return std::nullopt;
  return Hit{t, (1.0 / s.radius) * (t * dir - s.center), s.albedo};
}

void check_in_front(const Primitive& primitive) {
  const auto fail = [](const char* what) { throw InvalidScene(std::string("render_scene: ") + what); };
  if (const auto* b = std::get_if<Box>(&primitive)) {
    if (b->half_extents.x <= 0 || b->half_extents.y <= 0 || b->half_extents.z <= 0) fail("box with empty extent");
    if (b->center.z - b->half_extents.z <= kMinSceneDepth) fail("box behind or too close to the camera");
  } else if (const auto* s = std::get_if<Sphere>(&primitive)) {
    if (s->radius <= 0) fail("sphere with non-positive radius");
    if (s->center.z - s->radius <= kMinSceneDepth) fail("sphere behind or too close to the camera");
  } else {
    const auto& p = std::get<Plane>(primitive);
    if (dot(p.normal, p.normal) == 0.0) fail("plane with zero normal");
    if (std::abs(p.normal.z) > 0.5 * std::sqrt(dot(p.normal, p.normal)) &&
        dot(p.point, p.normal) / p.normal.z <= kMinSceneDepth) {
      fail("plane behind or too close to the camera");
    }
  }
}

double quantize_channel(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

}  // namespace

double quantize_depth(double metres) { return std::round(metres * 256.0) / 256.0; }

RenderResult render_scene(const SceneSpec& spec) {
  if (spec.rows < 1 || spec.cols < 1) throw InvalidScene("render_scene: image size must be positive");
  for (const auto& p : spec.primitives) check_in_front(p);

  std::vector<Primitive> scene = spec.primitives;
  if (spec.backdrop_distance > 0.0) {
    scene.push_back(Plane{{0.0, 0.0, spec.backdrop_distance}, {0.0, 0.0, -1.0}, spec.backdrop_albedo});
  }
  const std::size_t ground_index = scene.size();
  if (spec.ground) scene.push_back(Plane{{0.0, spec.camera_height, 0.0}, {0.0, -1.0, 0.0}, spec.ground_albedo});

  const Vec3 light = normalized({0.35, -0.8, -0.5});
  const double f = spec.focal_px();
  const double cx = spec.cx_px();
  const double cy = spec.cy_px();

  RenderResult out{RgbImage(spec.rows, spec.cols), DepthMap(spec.rows, spec.cols, 0.0)};
  for (int r = 0; r < spec.rows; ++r) {
    for (int c = 0; c < spec.cols; ++c) {
      const Vec3 dir{(c + 0.5 - cx) / f, (r + 0.5 - cy) / f, 1.0};
      Hit best;
      for (std::size_t i = 0; i < scene.size(); ++i) {
        const auto hit = std::visit([&](const auto& prim) { return intersect(prim, dir); }, scene[i]);
        if (!hit || hit->t >= best.t) continue;
        if (i == ground_index && hit->t > spec.ground_extent) continue;
        best = *hit;
      }
      if (!std::isfinite(best.t)) {
        throw InvalidScene("render_scene: pixel (" + std::to_string(r) + ", " + std::to_string(c) +
                           ") is not covered by any primitive");
      }
      const double depth = quantize_depth(best.t);
      if (!(depth > kMinSceneDepth && depth < kMaxSceneDepth)) {
        throw InvalidScene("render_scene: depth " + std::to_string(depth) + " m outside (0.5, 85)");
      }
      out.dense_truth.at(r, c) = depth;

      Vec3 n = normalized(best.normal);
      if (dot(n, dir) > 0.0) n = -1.0 * n;
      const double shade = 0.35 + 0.65 * std::max(0.0, dot(n, light));
      out.rgb.at(0, r, c) = quantize_channel(best.albedo.x * shade);
      out.rgb.at(1, r, c) = quantize_channel(best.albedo.y * shade);
      out.rgb.at(2, r, c) = quantize_channel(best.albedo.z * shade);
    }
  }
  return out;
}

DepthMap sample_lidar(const DepthMap& dense_truth, const ScanlineConfig& config, std::uint64_t seed) {
  if (config.lines < 1) throw ConfigError("sample_lidar: line count must be >= 1");
  if (config.col_step < 1) throw ConfigError("sample_lidar: col_step must be >= 1");
  if (config.row_jitter < 0) throw ConfigError("sample_lidar: row_jitter must be >= 0");
  if (!(config.dropout >= 0.0 && config.dropout <= 1.0)) throw ConfigError("sample_lidar: dropout must be in [0, 1]");
  const int rows = dense_truth.rows;
  const int first = static_cast<int>(std::lround(config.top_skip * rows));
  const int span = rows - first;
  if (first < 0 || span < 1) throw ConfigError("sample_lidar: top_skip leaves no rows to scan");

  Rng rng(seed);
  DepthMap out(rows, dense_truth.cols, 0.0);
  for (int line = 0; line < config.lines; ++line) {
    const int row = first + static_cast<int>(static_cast<std::int64_t>(line) * span / config.lines);
    const int phase = static_cast<int>(rng.uniform_int(0, config.col_step - 1));
    for (int c = phase; c < dense_truth.cols; c += config.col_step) {
      const bool dropped = rng.bernoulli(config.dropout);
      const int jitter = static_cast<int>(rng.uniform_int(-config.row_jitter, config.row_jitter));
      if (dropped) continue;
      const int r = std::clamp(row + jitter, 0, rows - 1);
      out.at(r, c) = dense_truth.at(r, c);
    }
  }
  return out;
}

ArtifactResult inject_artifacts(const DepthMap& lidar, const DepthMap& dense_truth, const ArtifactConfig& config,
                                std::uint64_t seed) {
  if (lidar.rows != dense_truth.rows || lidar.cols != dense_truth.cols) {
    throw ShapeMismatch("inject_artifacts: lidar and dense truth differ in size");
  }
  if (config.count < 0 || config.min_offset < 0 || config.max_offset < config.min_offset ||
      config.min_diameter < 1 || config.max_diameter < config.min_diameter) {
    throw ConfigError("inject_artifacts: invalid artifact configuration");
  }
  ArtifactResult out{lidar, BinaryMask(lidar.rows, lidar.cols, 0)};
  std::vector<std::size_t> sampled;
  for (std::size_t i = 0; i < lidar.size(); ++i) {
    if (lidar.values[i] > 0.0) sampled.push_back(i);
  }
  Rng rng(seed);
  for (int blob = 0; blob < config.count; ++blob) {
    const std::size_t centre = sampled.empty() ? 0 : sampled[rng.uniform_int(0, static_cast<std::int64_t>(sampled.size()) - 1)];
    const int diameter = static_cast<int>(rng.uniform_int(config.min_diameter, config.max_diameter));
    const double magnitude = quantize_depth(rng.uniform(config.min_offset, config.max_offset));
    const bool negative = config.random_sign && rng.bernoulli(0.5);
    if (sampled.empty() || magnitude == 0.0) continue;

    const int r0 = static_cast<int>(centre / lidar.cols);
    const int c0 = static_cast<int>(centre % lidar.cols);
    const double radius = 0.5 * diameter;
    const int reach = diameter / 2;
    for (int r = std::max(0, r0 - reach); r <= std::min(lidar.rows - 1, r0 + reach); ++r) {
      for (int c = std::max(0, c0 - reach); c <= std::min(lidar.cols - 1, c0 + reach); ++c) {
        const double dr = r - r0;
        const double dc = c - c0;
        if (dr * dr + dc * dc > radius * radius) continue;
        const double v = lidar.at(r, c);
        if (v <= 0.0 || out.mask.at(r, c)) continue;
        double shifted = negative ? v - magnitude : v + magnitude;
        if (shifted < kMinSceneDepth) shifted = v + magnitude;
        out.lidar.at(r, c) = shifted;
        out.mask.at(r, c) = 1;
      }
    }
  }
  return out;
}

DepthMap make_gt(const DepthMap& dense_truth, double fill_target, std::uint64_t seed, int row_period) {
  if (!(fill_target > 0.0 && fill_target <= 1.0)) throw ConfigError("make_gt: fill target must be in (0, 1]");
  if (row_period < 1) throw ConfigError("make_gt: row period must be >= 1");
  const double amplitude = std::min(0.5, (1.0 - fill_target) / fill_target);
  constexpr double kTwoPi = 6.283185307179586;
  Rng rng(seed);
  DepthMap out(dense_truth.rows, dense_truth.cols, 0.0);
  for (int r = 0; r < dense_truth.rows; ++r) {
    const double p = fill_target * (1.0 + amplitude * std::cos(kTwoPi * r / row_period));
    for (int c = 0; c < dense_truth.cols; ++c) {
      if (rng.uniform() < p) out.at(r, c) = dense_truth.at(r, c);
    }
  }
  return out;
}

SceneSpec random_scene(const SceneSpec& base, std::uint64_t seed) {
  SceneSpec spec = base;
  spec.seed = seed;
  Rng rng(derive_seed(seed, 100));
  const auto albedo = [&] { return Vec3{rng.uniform(0.1, 0.95), rng.uniform(0.1, 0.95), rng.uniform(0.1, 0.95)}; };
  const double lateral = 0.5 * spec.cols / spec.focal_px();
  const double h = spec.camera_height;

  if (spec.backdrop_distance > 0.0) spec.backdrop_distance = quantize_depth(rng.uniform(55.0, 80.0));
  const double shade = rng.uniform(0.85, 1.15);
  spec.ground_albedo = shade * spec.ground_albedo;

  const int boxes = static_cast<int>(rng.uniform_int(3, 7));
  for (int i = 0; i < boxes; ++i) {
    const double z = rng.uniform(6.0, 45.0);
    const Vec3 half{rng.uniform(0.7, 2.2), rng.uniform(0.6, 1.6), rng.uniform(0.7, 2.5)};
    const double x = rng.uniform(-0.9, 0.9) * lateral * z;
    spec.primitives.push_back(Box{{x, h - half.y, z}, half, albedo()});
  }
  const int spheres = static_cast<int>(rng.uniform_int(1, 3));
  for (int i = 0; i < spheres; ++i) {
    const double z = rng.uniform(5.0, 40.0);
    const double radius = rng.uniform(0.4, 1.4);
    const double x = rng.uniform(-0.9, 0.9) * lateral * z;
    spec.primitives.push_back(Sphere{{x, h - radius, z}, radius, albedo()});
  }
  return spec;
}

SceneSample make_sample(const SceneSpec& spec, std::string id) {
  auto rendered = render_scene(spec);
  const auto lidar = sample_lidar(rendered.dense_truth, spec.scanlines, derive_seed(spec.seed, 1));
  auto corrupted = inject_artifacts(lidar, rendered.dense_truth, spec.artifacts, derive_seed(spec.seed, 2));
  SceneSample sample;
  sample.id = std::move(id);
  sample.gt = make_gt(rendered.dense_truth, spec.gt_fill_target, derive_seed(spec.seed, 3), spec.gt_row_period);
  sample.rgb = std::move(rendered.rgb);
  sample.lidar = std::move(corrupted.lidar);
  sample.dense_truth = std::move(rendered.dense_truth);
  sample.artifact_mask = std::move(corrupted.mask);
  return sample;
}

std::string sample_id(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d", index);
  return buf;
}

CorpusStats generate_corpus(int count, const SceneSpec& base, std::uint64_t seed,
                            const std::filesystem::path& out_dir, double val_fraction) {
  if (count < 1) throw ConfigError("generate_corpus: count must be >= 1");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("generate_corpus: val fraction must be in [0, 1)");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create directory " + out_dir.string() + ": " + ec.message());

  CorpusStats stats;
  stats.count = count;
  stats.val = static_cast<int>(std::lround(count * val_fraction));
  stats.train = count - stats.val;
  std::vector<ManifestEntry> manifest;
  for (int i = 0; i < count; ++i) {
    const auto spec = random_scene(base, derive_seed(seed, static_cast<std::uint64_t>(i)));
    const auto sample = make_sample(spec, sample_id(i));
    write_sample(out_dir, sample);
    stats.mean_lidar_fill += fill_ratio(sample.lidar) / count;
    stats.mean_gt_fill += fill_ratio(sample.gt) / count;
    for (auto m : sample.artifact_mask->values) stats.artifact_pixels += m;
    manifest.push_back({sample.id, i < stats.train ? "train" : "val"});
  }
  write_manifest(out_dir, manifest);
  return stats;
}

}  // namespace fusiondepth

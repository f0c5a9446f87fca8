#include "fusiondepth/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "fusiondepth/error.hpp"

namespace fusiondepth {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw ConfigError("invalid value '" + value + "' for " + key + " (expected " + expected + ")");
}

double parse_double(const std::string& key, const std::string& value) {
  std::istringstream in(value);
  in.imbue(std::locale::classic());
  double v = 0.0;
  if (!(in >> v) || !(in >> std::ws).eof()) bad_value(key, value, "a number");
  return v;
}

std::int64_t parse_int(const std::string& key, const std::string& value) {
  std::int64_t v = 0;
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, v);
  if (ec != std::errc() || ptr != end) bad_value(key, value, "an integer");
  return v;
}

int parse_int32(const std::string& key, const std::string& value) {
  const auto v = parse_int(key, value);
  if (v < INT32_MIN || v > INT32_MAX) bad_value(key, value, "a 32-bit integer");
  return static_cast<int>(v);
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  std::uint64_t v = 0;
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, v);
  if (ec != std::errc() || ptr != end) bad_value(key, value, "a non-negative integer");
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
  if (value == "false" || value == "0" || value == "no" || value == "off") return false;
  bad_value(key, value, "true or false");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& value) {
  std::vector<int> out;
  std::stringstream in(value);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(parse_int32(key, trim(item)));
  if (out.empty()) bad_value(key, value, "a comma-separated list of integers");
  return out;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  double back = 0.0;
  // Prefer the shortest representation that round-trips.
  for (int precision = 1; precision <= 17; ++precision) {
    char shorter[40];
    std::snprintf(shorter, sizeof shorter, "%.*g", precision, v);
    std::istringstream in(shorter);
    in.imbue(std::locale::classic());
    in >> back;
    if (back == v) return shorter;
  }
  return buf;
}

std::string fmt(bool v) { return v ? "true" : "false"; }
std::string fmt(int v) { return std::to_string(v); }
std::string fmt(std::uint64_t v) { return std::to_string(v); }

std::string fmt(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string& key, const std::string& value)> set;
  std::function<std::string(const RunConfig&)> get;
  bool echoed = true;
};

template <typename Member>
Field field(std::string key, Member member) {
  Field f;
  f.key = std::move(key);
  f.set = [member](RunConfig& c, const std::string& k, const std::string& v) {
    auto& target = member(c);
    using V = std::decay_t<decltype(target)>;
    if constexpr (std::is_same_v<V, double>) target = parse_double(k, v);
    else if constexpr (std::is_same_v<V, bool>) target = parse_bool(k, v);
    else if constexpr (std::is_same_v<V, int>) target = parse_int32(k, v);
    else if constexpr (std::is_same_v<V, std::uint64_t>) target = parse_u64(k, v);
    else if constexpr (std::is_same_v<V, std::vector<int>>) target = parse_int_list(k, v);
  };
  f.get = [member](const RunConfig& c) { return fmt(member(const_cast<RunConfig&>(c))); };
  return f;
}

Field alias(std::string key, const Field& of) {
  Field f = of;
  f.key = std::move(key);
  f.echoed = false;
  return f;
}

Field vec3_field(std::string key, std::function<Vec3&(RunConfig&)> member) {
  Field f;
  f.key = std::move(key);
  f.set = [member](RunConfig& c, const std::string& k, const std::string& v) {
    std::stringstream in(v);
    std::string item;
    double xyz[3];
    int n = 0;
    while (std::getline(in, item, ',')) {
      if (n == 3) bad_value(k, v, "three comma-separated numbers");
      xyz[n++] = parse_double(k, trim(item));
    }
    if (n != 3) bad_value(k, v, "three comma-separated numbers");
    member(c) = Vec3{xyz[0], xyz[1], xyz[2]};
  };
  f.get = [member](const RunConfig& c) {
    const auto& p = member(const_cast<RunConfig&>(c));
    return fmt(p.x) + "," + fmt(p.y) + "," + fmt(p.z);
  };
  return f;
}

const std::vector<Field>& fields() {
  static const std::vector<Field> all = [] {
    std::vector<Field> f;
    // Corpus
    f.push_back(field("scene.count", [](RunConfig& c) -> int& { return c.corpus.count; }));
    f.push_back(field("scene.seed", [](RunConfig& c) -> std::uint64_t& { return c.corpus.seed; }));
    f.push_back(field("scene.val_fraction", [](RunConfig& c) -> double& { return c.corpus.val_fraction; }));
    // Scene
    f.push_back(field("scene.rows", [](RunConfig& c) -> int& { return c.scene.rows; }));
    f.push_back(field("scene.cols", [](RunConfig& c) -> int& { return c.scene.cols; }));
    f.push_back(alias("scene.h", f.at(f.size() - 2)));
    f.push_back(alias("scene.w", f.at(f.size() - 2)));
    f.push_back(field("scene.focal", [](RunConfig& c) -> double& { return c.scene.focal; }));
    f.push_back(field("scene.cx", [](RunConfig& c) -> double& { return c.scene.cx; }));
    f.push_back(field("scene.cy", [](RunConfig& c) -> double& { return c.scene.cy; }));
    f.push_back(field("scene.ground", [](RunConfig& c) -> bool& { return c.scene.ground; }));
    f.push_back(field("scene.camera_height", [](RunConfig& c) -> double& { return c.scene.camera_height; }));
    f.push_back(field("scene.ground_extent", [](RunConfig& c) -> double& { return c.scene.ground_extent; }));
    f.push_back(vec3_field("scene.ground_albedo", [](RunConfig& c) -> Vec3& { return c.scene.ground_albedo; }));
    f.push_back(field("scene.backdrop_distance", [](RunConfig& c) -> double& { return c.scene.backdrop_distance; }));
    f.push_back(vec3_field("scene.backdrop_albedo", [](RunConfig& c) -> Vec3& { return c.scene.backdrop_albedo; }));
    f.push_back(field("scene.gt_fill", [](RunConfig& c) -> double& { return c.scene.gt_fill_target; }));
    f.push_back(field("scene.gt_row_period", [](RunConfig& c) -> int& { return c.scene.gt_row_period; }));
    f.push_back(field("scene.lidar.lines", [](RunConfig& c) -> int& { return c.scene.scanlines.lines; }));
    f.push_back(field("scene.lidar.top_skip", [](RunConfig& c) -> double& { return c.scene.scanlines.top_skip; }));
    f.push_back(field("scene.lidar.col_step", [](RunConfig& c) -> int& { return c.scene.scanlines.col_step; }));
    f.push_back(field("scene.lidar.dropout", [](RunConfig& c) -> double& { return c.scene.scanlines.dropout; }));
    f.push_back(field("scene.lidar.row_jitter", [](RunConfig& c) -> int& { return c.scene.scanlines.row_jitter; }));
    f.push_back(field("scene.artifact.count", [](RunConfig& c) -> int& { return c.scene.artifacts.count; }));
    f.push_back(field("scene.artifact.min_offset", [](RunConfig& c) -> double& { return c.scene.artifacts.min_offset; }));
    f.push_back(field("scene.artifact.max_offset", [](RunConfig& c) -> double& { return c.scene.artifacts.max_offset; }));
    f.push_back(field("scene.artifact.min_diameter", [](RunConfig& c) -> int& { return c.scene.artifacts.min_diameter; }));
    f.push_back(field("scene.artifact.max_diameter", [](RunConfig& c) -> int& { return c.scene.artifacts.max_diameter; }));
    f.push_back(field("scene.artifact.random_sign", [](RunConfig& c) -> bool& { return c.scene.artifacts.random_sign; }));
    // Model
    Field variant;
    variant.key = "model.variant";
    variant.set = [](RunConfig& c, const std::string&, const std::string& v) { c.model.variant = parse_model_variant(v); };
    variant.get = [](const RunConfig& c) { return to_string(c.model.variant); };
    f.push_back(variant);
    f.push_back(field("model.global_widths", [](RunConfig& c) -> std::vector<int>& { return c.model.global_widths; }));
    f.push_back(field("model.local_width", [](RunConfig& c) -> int& { return c.model.local_width; }));
    f.push_back(field("model.guidance_skip", [](RunConfig& c) -> bool& { return c.model.guidance_skip; }));
    f.push_back(alias("train.guidance_skip", f.back()));
    f.push_back(field("model.second_encoder_bn", [](RunConfig& c) -> bool& { return c.model.second_encoder_bn; }));
    f.push_back(field("model.depth_scale", [](RunConfig& c) -> double& { return c.model.depth_scale; }));
    f.push_back(field("model.seed", [](RunConfig& c) -> std::uint64_t& { return c.model.seed; }));
    // Training
    f.push_back(field("train.lr", [](RunConfig& c) -> double& { return c.train.learning_rate; }));
    f.push_back(field("train.batch_size", [](RunConfig& c) -> int& { return c.train.batch_size; }));
    f.push_back(field("train.epochs", [](RunConfig& c) -> int& { return c.train.epochs; }));
    f.push_back(field("train.beta1", [](RunConfig& c) -> double& { return c.train.beta1; }));
    f.push_back(field("train.beta2", [](RunConfig& c) -> double& { return c.train.beta2; }));
    f.push_back(field("train.adam_eps", [](RunConfig& c) -> double& { return c.train.adam_eps; }));
    f.push_back(field("train.flip_prob", [](RunConfig& c) -> double& { return c.train.flip_prob; }));
    Field flip;
    flip.key = "train.flip_axis";
    flip.set = [](RunConfig& c, const std::string&, const std::string& v) { c.train.flip_axis = parse_flip_axis(v); };
    flip.get = [](const RunConfig& c) { return to_string(c.train.flip_axis); };
    f.push_back(flip);
    f.push_back(field("train.w_global", [](RunConfig& c) -> double& { return c.train.weights.global; }));
    f.push_back(field("train.w_local", [](RunConfig& c) -> double& { return c.train.weights.local; }));
    f.push_back(field("train.w_out", [](RunConfig& c) -> double& { return c.train.weights.out; }));
    Field focal;
    focal.key = "train.focal_gradient";
    focal.set = [](RunConfig& c, const std::string&, const std::string& v) { c.train.focal = parse_focal_gradient(v); };
    focal.get = [](const RunConfig& c) { return to_string(c.train.focal); };
    f.push_back(focal);
    f.push_back(field("train.seed", [](RunConfig& c) -> std::uint64_t& { return c.train.seed; }));
    f.push_back(field("train.checkpoint_every", [](RunConfig& c) -> int& { return c.train.checkpoint_every; }));
    f.push_back(field("train.repeats_per_epoch", [](RunConfig& c) -> int& { return c.train.repeats_per_epoch; }));
    f.push_back(field("train.patience", [](RunConfig& c) -> int& { return c.train.patience; }));
    f.push_back(field("train.restore_best", [](RunConfig& c) -> bool& { return c.train.restore_best; }));
    Field stage;
    stage.key = "train.stage";
    stage.set = [](RunConfig& c, const std::string&, const std::string& v) { c.train.stage = parse_train_stage(v); };
    stage.get = [](const RunConfig& c) { return to_string(c.train.stage); };
    f.push_back(stage);
    f.push_back(field("train.global_epochs", [](RunConfig& c) -> int& { return c.train.global_epochs; }));
    f.push_back(field("train.local_epochs", [](RunConfig& c) -> int& { return c.train.local_epochs; }));
    f.push_back(field("train.crop_rows", [](RunConfig& c) -> int& { return c.train.crop_rows; }));
    return f;
  }();
  return all;
}

}  // namespace

void apply_setting(RunConfig& config, const std::string& key, const std::string& value) {
  const auto k = trim(key);
  for (const auto& f : fields()) {
    if (f.key == k) {
      f.set(config, k, trim(value));
      return;
    }
  }
  throw ConfigError("unknown configuration key '" + k + "'");
}

void apply_config_text(RunConfig& config, const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    try {
      apply_setting(config, line.substr(0, eq), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void apply_config_file(RunConfig& config, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  apply_config_text(config, buffer.str(), path.string());
}

std::string to_config_text(const RunConfig& config) {
  std::string out;
  for (const auto& f : fields()) {
    if (f.echoed) out += f.key + " = " + f.get(config) + "\n";
  }
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) {
    if (f.echoed) keys.push_back(f.key);
  }
  return keys;
}

}  // namespace fusiondepth

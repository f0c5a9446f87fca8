#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fusiondepth/model.hpp"
#include "fusiondepth/simdata.hpp"
#include "fusiondepth/train.hpp"

namespace fusiondepth {

struct CorpusConfig {
  int count = 200;
  std::uint64_t seed = 1;
  double val_fraction = 0.2;
};

/// Everything a run can be configured with, addressed as `scene.*`,
/// `model.*` and `train.*` keys.
struct RunConfig {
  CorpusConfig corpus;
  SceneSpec scene;
  ModelConfig model;
  TrainConfig train;
};

/// Sets one key. Throws ConfigError for unknown keys or unparsable values.
void apply_setting(RunConfig& config, const std::string& key, const std::string& value);

/// Applies `key = value` lines. '#' starts a comment; blank lines are ignored.
void apply_config_text(RunConfig& config, const std::string& text, const std::string& origin = "<config>");
void apply_config_file(RunConfig& config, const std::filesystem::path& path);

/// Every key with its effective value, one `key = value` line each, in a fixed order.
std::string to_config_text(const RunConfig& config);

/// All recognised keys, in echo order.
std::vector<std::string> config_keys();

}  // namespace fusiondepth

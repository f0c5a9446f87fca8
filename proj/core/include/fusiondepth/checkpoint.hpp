#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fusiondepth/nn.hpp"

namespace fusiondepth {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// One stored tensor, widened to double on load.
struct CheckpointEntry {
  std::string name;
  bool is_buffer = false;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string config_text;
  std::vector<CheckpointEntry> entries;
};

/// Binary container, see docs/checkpoint_format.md.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const std::string& config_text, const StateList<T>& state);

Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies stored values into `state` by name. Every tensor of `state` must be
/// present with the same shape; throws FormatError otherwise.
template <typename T>
void apply_checkpoint(const Checkpoint& checkpoint, const StateList<T>& state);

}  // namespace fusiondepth

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fusiondepth/loss.hpp"
#include "fusiondepth/model.hpp"
#include "fusiondepth/rng.hpp"
#include "fusiondepth/sample.hpp"

namespace fusiondepth {

enum class FlipAxis {
  mirror,       // left-right, about the vertical axis
  upside_down,  // top-bottom, about the horizontal axis
};

enum class TrainStage { end2end, global, local, staged };

std::string to_string(FlipAxis axis);
FlipAxis parse_flip_axis(const std::string& text);
std::string to_string(TrainStage stage);
TrainStage parse_train_stage(const std::string& text);
std::string to_string(FocalGradient mode);
FocalGradient parse_focal_gradient(const std::string& text);

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 4;
  /// Epochs of the end-to-end stage (also the only stage unless staged).
  int epochs = 30;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double flip_prob = 0.5;
  FlipAxis flip_axis = FlipAxis::mirror;
  LossWeights weights;
  FocalGradient focal = FocalGradient::detached;
  std::uint64_t seed = 1;
  /// Also write a checkpoint every this many epochs (0: only best and final).
  int checkpoint_every = 0;
  /// Passes over the training set per epoch; the focal epoch term is per epoch.
  int repeats_per_epoch = 1;
  /// Stop after this many epochs without validation improvement (0: never).
  int patience = 0;
  /// Reload the best-validation weights when a stage ends.
  bool restore_best = true;
  TrainStage stage = TrainStage::end2end;
  int global_epochs = 10;
  int local_epochs = 10;
  /// Bottom crop applied when loading samples (0: none).
  int crop_rows = 0;

  void validate() const;
};

/// Which prediction a training stage optimises and validates.
enum class Objective {
  composite,     // weighted global + local + fused terms (fused only for single-branch models)
  global_depth,  // d_global alone
  local_depth,   // d_local alone
};

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::int64_t step = 0;
};

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Leave parameters without a gradient untouched instead of throwing MissingGradient.
  bool skip_missing = false;
};

/// Bias-corrected Adam update of every parameter from its accumulated grad.
template <typename T>
void adam_step(const std::vector<Tensor<T>>& params, AdamState<T>& state, const AdamOptions& options);

/// Mirrors every modality of a sample consistently.
SceneSample flip_sample(const SceneSample& sample, FlipAxis axis);
/// Flips with probability config.flip_prob (one draw per call).
SceneSample augment(const SceneSample& sample, Rng& rng, const TrainConfig& config);

template <typename T>
struct Batch {
  Tensor<T> rgb;    // [N,3,H,W]
  Tensor<T> lidar;  // [N,1,H,W]
  Tensor<T> gt;     // [N,1,H,W]
  Tensor<T> mask;   // [N,1,H,W], 1 where gt > 0
};

/// Stacks samples of equal size. Throws AlignmentError otherwise.
template <typename T>
Batch<T> make_batch(const std::vector<const SceneSample*>& samples);

std::vector<SceneSample> load_split(const std::filesystem::path& root, const std::string& split, int crop_rows = 0);

enum class EvalTarget { fused, global, local };
std::string to_string(EvalTarget target);
EvalTarget parse_eval_target(const std::string& text);

struct SampleMetrics {
  std::string id;
  DepthMetrics gt;
  /// Error against the dense truth on corrupted-input pixels, when known.
  std::optional<DepthMetrics> artifact;
};

struct EvalResult {
  EvalTarget target = EvalTarget::fused;
  std::vector<SampleMetrics> samples;
  DepthMetrics aggregate;
  std::optional<DepthMetrics> artifact_aggregate;
};

/// Inference (batch norm in eval mode) on each sample; predictions are
/// clamped to >= 0 before scoring.
template <typename T>
EvalResult evaluate(FusionNet<T>& model, const std::vector<SceneSample>& samples, EvalTarget target,
                    int batch_size = 4);

/// Clamped prediction maps of one sample. Unavailable branches are empty.
struct Prediction {
  DepthMap fused;
  DepthMap global;
  DepthMap local;
};

template <typename T>
Prediction predict(FusionNet<T>& model, const SceneSample& sample);

struct EpochLog {
  std::string stage;
  int epoch = 0;
  double train_loss = 0.0;
  double val_rmse_mm = 0.0;
  double val_mae_mm = 0.0;
  std::optional<double> val_artifact_rmse_mm;
  double wall_time_s = 0.0;
  bool best = false;
};

/// One JSON object per line: stage, epoch, train_loss, val_rmse_mm, val_mae_mm, ...
std::string to_json_line(const EpochLog& log);

template <typename T>
struct BatchEvent {
  const std::string& stage;
  int epoch;
  int batch;
  double loss;
  const Batch<T>& batch_data;
  const FusionNetOutput<T>& output;
};

template <typename T>
struct TrainHooks {
  std::function<void(const BatchEvent<T>&)> on_batch;
  /// Called after validation; the model holds the weights of this epoch.
  std::function<void(const EpochLog&, FusionNet<T>&)> on_epoch;
  /// Called by staged_training when a stage has finished (after best-restore).
  std::function<void(const std::string&, FusionNet<T>&)> on_stage_end;
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  int best_epoch = -1;
  double best_val_rmse_mm = 0.0;
  std::vector<double> batch_losses;
};

/// Seeded shuffle, augmentation, forward, loss at the 0-based epoch, backward
/// and Adam, then validation. Throws NonFiniteLoss on a non-finite loss.
template <typename T>
TrainResult train_loop(FusionNet<T>& model, const std::vector<SceneSample>& train, const std::vector<SceneSample>& val,
                       const TrainConfig& config, Objective objective, int epochs, const std::string& stage_name,
                       const TrainHooks<T>& hooks = {});

struct StagedResult {
  std::vector<TrainResult> stages;
};

/// Runs the stages selected by config.stage: global alone, local with the
/// global branch frozen, then end-to-end. Frozen branches are restored afterwards.
template <typename T>
StagedResult staged_training(FusionNet<T>& model, const std::vector<SceneSample>& train,
                             const std::vector<SceneSample>& val, const TrainConfig& config,
                             const TrainHooks<T>& hooks = {});

}  // namespace fusiondepth

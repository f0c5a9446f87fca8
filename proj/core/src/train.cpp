#include "fusiondepth/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "fusiondepth/error.hpp"
#include "fusiondepth/kittiio.hpp"

namespace fusiondepth {

std::string to_string(FlipAxis axis) { return axis == FlipAxis::mirror ? "mirror" : "upside-down"; }

FlipAxis parse_flip_axis(const std::string& text) {
  if (text == "mirror") return FlipAxis::mirror;
  if (text == "upside-down") return FlipAxis::upside_down;
  throw ConfigError("unknown flip axis '" + text + "' (expected mirror or upside-down)");
}

std::string to_string(TrainStage stage) {
  switch (stage) {
    case TrainStage::end2end: return "end2end";
    case TrainStage::global: return "global";
    case TrainStage::local: return "local";
    case TrainStage::staged: return "staged";
  }
  return "end2end";
}

TrainStage parse_train_stage(const std::string& text) {
  if (text == "end2end") return TrainStage::end2end;
  if (text == "global") return TrainStage::global;
  if (text == "local") return TrainStage::local;
  if (text == "staged") return TrainStage::staged;
  throw ConfigError("unknown stage '" + text + "' (expected end2end, global, local or staged)");
}

std::string to_string(FocalGradient mode) { return mode == FocalGradient::detached ? "detached" : "full"; }

FocalGradient parse_focal_gradient(const std::string& text) {
  if (text == "detached") return FocalGradient::detached;
  if (text == "full") return FocalGradient::full;
  throw ConfigError("unknown focal gradient mode '" + text + "' (expected detached or full)");
}

std::string to_string(EvalTarget target) {
  switch (target) {
    case EvalTarget::fused: return "fused";
    case EvalTarget::global: return "global-only";
    case EvalTarget::local: return "local-only";
  }
  return "fused";
}

EvalTarget parse_eval_target(const std::string& text) {
  if (text == "fused") return EvalTarget::fused;
  if (text == "global-only" || text == "global") return EvalTarget::global;
  if (text == "local-only" || text == "local") return EvalTarget::local;
  throw ConfigError("unknown ablation '" + text + "' (expected fused, local-only or global-only)");
}

void TrainConfig::validate() const {
  const auto fail = [](const std::string& what) { throw ConfigError(what); };
  if (!(learning_rate > 0.0)) fail("train.lr must be > 0");
  if (batch_size < 1) fail("train.batch_size must be >= 1");
  if (epochs < 0 || global_epochs < 0 || local_epochs < 0) fail("epoch counts must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("Adam betas must be in [0, 1)");
  if (!(adam_eps > 0.0)) fail("train.adam_eps must be > 0");
  if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) fail("train.flip_prob must be in [0, 1]");
  if (weights.global < 0 || weights.local < 0 || weights.out < 0) fail("loss weights must be >= 0");
  if (checkpoint_every < 0) fail("train.checkpoint_every must be >= 0");
  if (repeats_per_epoch < 1) fail("train.repeats_per_epoch must be >= 1");
  if (patience < 0) fail("train.patience must be >= 0");
  if (crop_rows < 0) fail("train.crop_rows must be >= 0");
}

template <typename T>
void adam_step(const std::vector<Tensor<T>>& params, AdamState<T>& state, const AdamOptions& options) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad() && !options.skip_missing) {
      throw MissingGradient("adam_step: parameter " + std::to_string(i) + " " + shape_str(params[i].shape()) +
                            " has no gradient");
    }
  }
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(static_cast<std::size_t>(params[i].numel()), T(0));
      state.v[i].assign(static_cast<std::size_t>(params[i].numel()), T(0));
    }
  }
  ++state.step;
  const double b1 = options.beta1, b2 = options.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) continue;
    Tensor<T> p = params[i];
    auto value = p.data();
    auto grad = p.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != value.size()) throw ShapeMismatch("adam_step: optimizer state does not match parameter " + std::to_string(i));
    for (std::size_t k = 0; k < value.size(); ++k) {
      const double g = grad[k];
      const double mk = b1 * m[k] + (1.0 - b1) * g;
      const double vk = b2 * v[k] + (1.0 - b2) * g * g;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      value[k] = static_cast<T>(value[k] - options.learning_rate * (mk / c1) / (std::sqrt(vk / c2) + options.eps));
    }
  }
}

namespace {

template <typename Image>
Image flip_planes(const Image& image, int planes, FlipAxis axis) {
  Image out = image;
  const int rows = image.rows, cols = image.cols;
  for (int p = 0; p < planes; ++p) {
    const std::size_t base = static_cast<std::size_t>(p) * rows * cols;
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        const int sr = axis == FlipAxis::upside_down ? rows - 1 - r : r;
        const int sc = axis == FlipAxis::mirror ? cols - 1 - c : c;
        out.values[base + static_cast<std::size_t>(r) * cols + c] = image.values[base + static_cast<std::size_t>(sr) * cols + sc];
      }
    }
  }
  return out;
}

template <typename T>
void copy_map(const DepthMap& map, std::span<T> dst) {
  for (std::size_t i = 0; i < map.size(); ++i) dst[i] = static_cast<T>(map.values[i]);
}

template <typename T>
DepthMap extract_map(const Tensor<T>& t, std::int64_t n, int rows, int cols) {
  DepthMap out(rows, cols, 0.0);
  const auto src = t.data();
  const std::size_t plane = static_cast<std::size_t>(rows) * cols;
  for (std::size_t i = 0; i < plane; ++i) out.values[i] = std::max(0.0, static_cast<double>(src[n * plane + i]));
  return out;
}

struct StateSnapshot {
  std::vector<std::vector<double>> values;
};

template <typename T>
StateSnapshot snapshot(const StateList<T>& state) {
  StateSnapshot s;
  for (const auto* list : {&state.params, &state.buffers}) {
    for (const auto& nt : *list) s.values.emplace_back(nt.tensor.data().begin(), nt.tensor.data().end());
  }
  return s;
}

template <typename T>
void restore(const StateList<T>& state, const StateSnapshot& snap) {
  std::size_t i = 0;
  for (const auto* list : {&state.params, &state.buffers}) {
    for (const auto& nt : *list) {
      Tensor<T> handle = nt.tensor;
      auto dst = handle.data();
      const auto& src = snap.values.at(i++);
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(src[k]);
    }
  }
}

template <typename T>
FusionNetOutput<T> run_model(FusionNet<T>& model, const Batch<T>& batch, Objective objective, bool training) {
  if (objective == Objective::global_depth) return model.forward_global(batch.rgb, batch.lidar, training);
  return model.forward(batch.rgb, batch.lidar, training);
}

EvalTarget validation_target(Objective objective) {
  switch (objective) {
    case Objective::global_depth: return EvalTarget::global;
    case Objective::local_depth: return EvalTarget::local;
    case Objective::composite: break;
  }
  return EvalTarget::fused;
}

template <typename T>
double term_value(const Tensor<T>& pred, const Batch<T>& batch, int epoch, FocalGradient mode) {
  return static_cast<double>(focal_mse(pred.detach(), batch.gt, batch.mask, epoch, mode).item());
}

}  // namespace

SceneSample flip_sample(const SceneSample& s, FlipAxis axis) {
  SceneSample out;
  out.id = s.id;
  out.rgb = flip_planes(s.rgb, 3, axis);
  out.lidar = flip_planes(s.lidar, 1, axis);
  out.gt = flip_planes(s.gt, 1, axis);
  if (s.dense_truth) out.dense_truth = flip_planes(*s.dense_truth, 1, axis);
  if (s.artifact_mask) out.artifact_mask = flip_planes(*s.artifact_mask, 1, axis);
  return out;
}

SceneSample augment(const SceneSample& sample, Rng& rng, const TrainConfig& config) {
  if (rng.bernoulli(config.flip_prob)) return flip_sample(sample, config.flip_axis);
  return sample;
}

template <typename T>
Batch<T> make_batch(const std::vector<const SceneSample*>& samples) {
  if (samples.empty()) throw ShapeMismatch("make_batch: no samples");
  const int rows = samples.front()->rows(), cols = samples.front()->cols();
  const auto N = static_cast<std::int64_t>(samples.size());
  Batch<T> b;
  b.rgb = Tensor<T>::zeros({N, 3, rows, cols});
  b.lidar = Tensor<T>::zeros({N, 1, rows, cols});
  b.gt = Tensor<T>::zeros({N, 1, rows, cols});
  b.mask = Tensor<T>::zeros({N, 1, rows, cols});
  const std::size_t plane = static_cast<std::size_t>(rows) * cols;
  for (std::size_t n = 0; n < samples.size(); ++n) {
    const auto& s = *samples[n];
    if (s.lidar.rows != rows || s.lidar.cols != cols || s.rgb.rows != rows || s.rgb.cols != cols ||
        s.gt.rows != rows || s.gt.cols != cols) {
      throw AlignmentError("make_batch: sample " + s.id + " differs in size from " + samples.front()->id);
    }
    copy_map(s.lidar, b.lidar.data().subspan(n * plane, plane));
    copy_map(s.gt, b.gt.data().subspan(n * plane, plane));
    auto rgb = b.rgb.data().subspan(n * 3 * plane, 3 * plane);
    for (std::size_t i = 0; i < 3 * plane; ++i) rgb[i] = static_cast<T>(s.rgb.values[i]);
    auto mask = b.mask.data().subspan(n * plane, plane);
    for (std::size_t i = 0; i < plane; ++i) mask[i] = s.gt.values[i] > 0.0 ? T(1) : T(0);
  }
  return b;
}

std::vector<SceneSample> load_split(const std::filesystem::path& root, const std::string& split, int crop_rows) {
  std::vector<SceneSample> out;
  for (const auto& id : manifest_ids(root, split)) out.push_back(read_sample(root, id, crop_rows));
  return out;
}

template <typename T>
Prediction predict(FusionNet<T>& model, const SceneSample& sample) {
  const auto batch = make_batch<T>({&sample});
  const auto out = model.forward(batch.rgb, batch.lidar, false);
  Prediction p;
  p.fused = extract_map(out.d_out, 0, sample.rows(), sample.cols());
  if (out.d_global.defined()) p.global = extract_map(out.d_global, 0, sample.rows(), sample.cols());
  if (out.d_local.defined()) p.local = extract_map(out.d_local, 0, sample.rows(), sample.cols());
  return p;
}

template <typename T>
EvalResult evaluate(FusionNet<T>& model, const std::vector<SceneSample>& samples, EvalTarget target, int batch_size) {
  if (samples.empty()) throw EmptyMask("evaluate: no samples");
  if (batch_size < 1) throw ConfigError("evaluate: batch size must be >= 1");
  EvalResult result;
  result.target = target;
  MetricAccumulator pooled, pooled_artifact;
  bool any_artifact_info = false;
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<const SceneSample*> group;
    for (std::size_t i = start; i < end; ++i) group.push_back(&samples[i]);
    const auto batch = make_batch<T>(group);
    const bool global_only_pass = target == EvalTarget::global;
    const auto out = global_only_pass ? model.forward_global(batch.rgb, batch.lidar, false)
                                      : model.forward(batch.rgb, batch.lidar, false);
    const Tensor<T>* pred = &out.d_out;
    if (target == EvalTarget::global) pred = &out.d_global;
    if (target == EvalTarget::local) pred = &out.d_local;
    if (!pred->defined()) throw ConfigError("evaluate: model has no " + to_string(target) + " prediction");
    for (std::size_t i = start; i < end; ++i) {
      const auto& s = samples[i];
      const auto map = extract_map(*pred, static_cast<std::int64_t>(i - start), s.rows(), s.cols());
      SampleMetrics m;
      m.id = s.id;
      const auto mask = valid_mask(s.gt);
      MetricAccumulator acc;
      acc.add(map.values, s.gt.values, mask.values);
      pooled.add(map.values, s.gt.values, mask.values);
      m.gt = acc.valid_pixels() > 0 ? acc.result() : DepthMetrics{};
      if (s.dense_truth && s.artifact_mask) {
        any_artifact_info = true;
        MetricAccumulator art;
        art.add(map.values, s.dense_truth->values, s.artifact_mask->values);
        pooled_artifact.add(map.values, s.dense_truth->values, s.artifact_mask->values);
        if (art.valid_pixels() > 0) m.artifact = art.result();
      }
      result.samples.push_back(std::move(m));
    }
  }
  result.aggregate = pooled.result();
  if (any_artifact_info && pooled_artifact.valid_pixels() > 0) result.artifact_aggregate = pooled_artifact.result();
  return result;
}

std::string to_json_line(const EpochLog& log) {
  char buf[512];
  std::string artifact = "null";
  if (log.val_artifact_rmse_mm) {
    char a[64];
    std::snprintf(a, sizeof a, "%.6f", *log.val_artifact_rmse_mm);
    artifact = a;
  }
  std::snprintf(buf, sizeof buf,
                "{\"stage\":\"%s\",\"epoch\":%d,\"train_loss\":%.9g,\"val_rmse_mm\":%.6f,\"val_mae_mm\":%.6f,"
                "\"val_artifact_rmse_mm\":%s,\"wall_time_s\":%.3f,\"best\":%s}",
                log.stage.c_str(), log.epoch, log.train_loss, log.val_rmse_mm, log.val_mae_mm, artifact.c_str(),
                log.wall_time_s, log.best ? "true" : "false");
  return buf;
}

template <typename T>
TrainResult train_loop(FusionNet<T>& model, const std::vector<SceneSample>& train, const std::vector<SceneSample>& val,
                       const TrainConfig& config, Objective objective, int epochs, const std::string& stage_name,
                       const TrainHooks<T>& hooks) {
  config.validate();
  if (train.empty()) throw ConfigError("train_loop: empty training set");
  if (epochs < 0) throw ConfigError("train_loop: epochs must be >= 0");
  if (objective == Objective::global_depth && !model.has_global()) throw ConfigError("stage needs a global branch");
  if (objective == Objective::local_depth && !model.has_local()) throw ConfigError("stage needs a local branch");

  const auto params = model.trainable_parameters();
  const bool fused_model = model.config().variant == ModelVariant::fusion;
  // Single-branch objectives leave the unused confidence head without a gradient.
  const AdamOptions adam{config.learning_rate, config.beta1, config.beta2, config.adam_eps,
                         objective != Objective::composite || !fused_model};
  AdamState<T> adam_state;
  const std::uint64_t stage_stream = stage_name == "global" ? 1 : stage_name == "local" ? 2 : 3;
  Rng order_rng(derive_seed(config.seed, 1000 + stage_stream));
  Rng augment_rng(derive_seed(config.seed, 2000 + stage_stream));
  const EvalTarget val_target = validation_target(objective);

  TrainResult result;
  result.best_val_rmse_mm = std::numeric_limits<double>::infinity();
  std::optional<StateSnapshot> best;
  int since_best = 0;
  const auto state = model.state();

  for (int epoch = 0; epoch < epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double loss_sum = 0.0;
    int batches = 0;
    for (int repeat = 0; repeat < config.repeats_per_epoch; ++repeat) {
      std::vector<std::size_t> order(train.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      order_rng.shuffle(order);
      for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
        const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
        std::vector<SceneSample> augmented;
        augmented.reserve(end - start);
        for (std::size_t i = start; i < end; ++i) augmented.push_back(augment(train[order[i]], augment_rng, config));
        std::vector<const SceneSample*> group;
        for (const auto& s : augmented) group.push_back(&s);
        const auto batch = make_batch<T>(group);

        for (auto p : params) p.clear_grad();
        Tape<T> tape;
        Tensor<T> loss;
        FusionNetOutput<T> out;
        try {
          TapeScope<T> scope(tape);
          out = run_model(model, batch, objective, true);
          switch (objective) {
            case Objective::global_depth:
              loss = focal_mse(out.d_global, batch.gt, batch.mask, epoch, config.focal);
              break;
            case Objective::local_depth:
              loss = focal_mse(out.d_local, batch.gt, batch.mask, epoch, config.focal);
              break;
            case Objective::composite:
              loss = fused_model ? composite_loss(out.d_out, out.d_global, out.d_local, batch.gt, batch.mask, epoch,
                                                  config.weights, config.focal)
                                 : focal_mse(out.d_out, batch.gt, batch.mask, epoch, config.focal);
              break;
          }
        } catch (const NonFinite& e) {
          throw NonFiniteLoss(std::string("non-finite value in forward pass: ") + e.what(), epoch, batches, "forward");
        }
        const double value = static_cast<double>(loss.item());
        if (!std::isfinite(value)) {
          std::string term = "loss";
          if (objective == Objective::composite && fused_model) {
            const std::pair<const char*, const Tensor<T>*> terms[] = {
                {"global", &out.d_global}, {"local", &out.d_local}, {"out", &out.d_out}};
            for (const auto& [name, pred] : terms) {
              if (!std::isfinite(term_value(*pred, batch, epoch, config.focal))) {
                term = name;
                break;
              }
            }
          }
          throw NonFiniteLoss("non-finite training loss in stage " + stage_name + " at epoch " +
                                  std::to_string(epoch) + ", batch " + std::to_string(batches) + " (term " + term + ")",
                              epoch, batches, term);
        }
        backward(loss, tape);
        adam_step(params, adam_state, adam);
        if (hooks.on_batch) hooks.on_batch(BatchEvent<T>{stage_name, epoch, batches, value, batch, out});
        result.batch_losses.push_back(value);
        loss_sum += value;
        ++batches;
      }
    }

    EpochLog log;
    log.stage = stage_name;
    log.epoch = epoch;
    log.train_loss = loss_sum / std::max(1, batches);
    if (!val.empty()) {
      const auto ev = evaluate(model, val, val_target, config.batch_size);
      log.val_rmse_mm = ev.aggregate.rmse_mm;
      log.val_mae_mm = ev.aggregate.mae_mm;
      if (ev.artifact_aggregate) log.val_artifact_rmse_mm = ev.artifact_aggregate->rmse_mm;
    }
    const double score = val.empty() ? log.train_loss : log.val_rmse_mm;
    if (score < result.best_val_rmse_mm || result.best_epoch < 0) {
      result.best_val_rmse_mm = score;
      result.best_epoch = epoch;
      log.best = true;
      since_best = 0;
      if (config.restore_best) best = snapshot(state);
    } else {
      ++since_best;
    }
    log.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.epochs.push_back(log);
    if (hooks.on_epoch) hooks.on_epoch(log, model);
    if (config.patience > 0 && since_best >= config.patience) break;
  }
  if (val.empty()) result.best_val_rmse_mm = std::numeric_limits<double>::quiet_NaN();
  if (best && config.restore_best) restore(state, *best);
  return result;
}

template <typename T>
StagedResult staged_training(FusionNet<T>& model, const std::vector<SceneSample>& train,
                             const std::vector<SceneSample>& val, const TrainConfig& config,
                             const TrainHooks<T>& hooks) {
  config.validate();
  StagedResult result;
  const bool was_global_frozen = model.global_frozen();
  const bool was_local_frozen = model.local_frozen();
  const auto finish = [&](const std::string& stage) {
    if (hooks.on_stage_end) hooks.on_stage_end(stage, model);
  };
  const auto run_global = [&] {
    if (!model.has_global()) return;
    model.set_global_frozen(false);
    if (model.has_local()) model.set_local_frozen(true);
    result.stages.push_back(train_loop(model, train, val, config, Objective::global_depth, config.global_epochs,
                                       "global", hooks));
    finish("global");
  };
  const auto run_local = [&] {
    if (!model.has_local()) return;
    model.set_local_frozen(false);
    if (model.has_global()) model.set_global_frozen(true);
    result.stages.push_back(
        train_loop(model, train, val, config, Objective::local_depth, config.local_epochs, "local", hooks));
    finish("local");
  };
  const auto run_end2end = [&] {
    if (model.has_global()) model.set_global_frozen(false);
    if (model.has_local()) model.set_local_frozen(false);
    result.stages.push_back(
        train_loop(model, train, val, config, Objective::composite, config.epochs, "end2end", hooks));
    finish("end2end");
  };
  try {
    switch (config.stage) {
      case TrainStage::end2end: run_end2end(); break;
      case TrainStage::global: run_global(); break;
      case TrainStage::local: run_local(); break;
      case TrainStage::staged:
        run_global();
        run_local();
        run_end2end();
        break;
    }
  } catch (...) {
    if (model.has_global()) model.set_global_frozen(was_global_frozen);
    if (model.has_local()) model.set_local_frozen(was_local_frozen);
    throw;
  }
  if (model.has_global()) model.set_global_frozen(was_global_frozen);
  if (model.has_local()) model.set_local_frozen(was_local_frozen);
  return result;
}

#define FUSIONDEPTH_INSTANTIATE_TRAIN(T)                                                                          \
  template void adam_step<T>(const std::vector<Tensor<T>>&, AdamState<T>&, const AdamOptions&);                   \
  template Batch<T> make_batch<T>(const std::vector<const SceneSample*>&);                                        \
  template Prediction predict<T>(FusionNet<T>&, const SceneSample&);                                              \
  template EvalResult evaluate<T>(FusionNet<T>&, const std::vector<SceneSample>&, EvalTarget, int);               \
  template TrainResult train_loop<T>(FusionNet<T>&, const std::vector<SceneSample>&,                              \
                                     const std::vector<SceneSample>&, const TrainConfig&, Objective, int,         \
                                     const std::string&, const TrainHooks<T>&);                                   \
  template StagedResult staged_training<T>(FusionNet<T>&, const std::vector<SceneSample>&,                        \
                                           const std::vector<SceneSample>&, const TrainConfig&, const TrainHooks<T>&);

FUSIONDEPTH_INSTANTIATE_TRAIN(float)
FUSIONDEPTH_INSTANTIATE_TRAIN(double)

#undef FUSIONDEPTH_INSTANTIATE_TRAIN

}  // namespace fusiondepth

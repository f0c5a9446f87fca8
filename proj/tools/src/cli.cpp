#include "fusiondepth/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "fusiondepth/checkpoint.hpp"
#include "fusiondepth/config.hpp"
#include "fusiondepth/gradcheck.hpp"
#include "fusiondepth/kittiio.hpp"
#include "fusiondepth/loss.hpp"
#include "fusiondepth/model.hpp"
#include "fusiondepth/simdata.hpp"
#include "fusiondepth/train.hpp"

namespace fusiondepth {
namespace {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;
using Model = FusionNet<float>;

/// A flag that, when given, overrides one config key.
struct Override {
  std::string key;
  std::string value;
  CLI::Option* option = nullptr;
};

struct ConfigArgs {
  std::string config_file;
  std::vector<std::string> settings;
  std::vector<Override> overrides;

  void add_to(CLI::App& app) {
    app.add_option("--config", config_file, "Plain-text key = value configuration file");
    app.add_option("--set", settings, "Override one key, as key=value (repeatable)");
  }

  void add_flag(CLI::App& app, const std::string& flag, const std::string& key, const std::string& help) {
    overrides.push_back({key, {}, nullptr});
    // Pointer into `overrides` is not stable while adding, so bind by index.
    const std::size_t index = overrides.size() - 1;
    overrides[index].option =
        app.add_option_function<std::string>(flag, [this, index](const std::string& v) { overrides[index].value = v; },
                                             help);
  }

  /// File values, then --set, then dedicated flags.
  RunConfig resolve() const {
    RunConfig config;
    if (!config_file.empty()) apply_config_file(config, config_file);
    for (const auto& s : settings) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      apply_setting(config, trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
    }
    for (const auto& o : overrides) {
      if (o.option->count() > 0) apply_setting(config, o.key, o.value);
    }
    return config;
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t");
    return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
  }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

/// Rebuilds the model described by a checkpoint and loads its weights.
Model load_model(const fs::path& path, RunConfig* config_out = nullptr) {
  const auto ck = load_checkpoint(path);
  RunConfig config;
  apply_config_text(config, ck.config_text, path.string());
  Model model(config.model);
  apply_checkpoint(ck, model.state());
  if (config_out) *config_out = config;
  return model;
}

// ---------------------------------------------------------------- simulate

struct SimulateCmd {
  ConfigArgs cfg;
  std::string out_dir;

  void setup(CLI::App& app) {
    cfg.add_to(app);
    app.add_option("--out", out_dir, "Output corpus directory")->required();
    cfg.add_flag(app, "--count", "scene.count", "Number of scenes");
    cfg.add_flag(app, "--seed", "scene.seed", "Corpus seed");
    cfg.add_flag(app, "--rows", "scene.rows", "Image height");
    cfg.add_flag(app, "--cols", "scene.cols", "Image width");
    cfg.add_flag(app, "--val-fraction", "scene.val_fraction", "Fraction of scenes in the val split");
  }

  int run(std::ostream& out) const {
    const auto config = cfg.resolve();
    if (config.corpus.count < 1) throw ConfigError("scene.count must be >= 1");
    ensure_dir(out_dir);
    write_text(fs::path(out_dir) / "config.txt", to_config_text(config));
    const auto stats =
        generate_corpus(config.corpus.count, config.scene, config.corpus.seed, out_dir, config.corpus.val_fraction);
    out << "manifest: " << (fs::path(out_dir) / "manifest.txt").string() << "\n"
        << "samples: " << stats.count << " (train " << stats.train << ", val " << stats.val << ")\n"
        << "mean lidar fill: " << fixed(stats.mean_lidar_fill, 4) << "\n"
        << "mean gt fill: " << fixed(stats.mean_gt_fill, 4) << "\n"
        << "artifact pixels: " << stats.artifact_pixels << "\n";
    return kExitOk;
  }
};

// ---------------------------------------------------------------- train

struct TrainCmd {
  ConfigArgs cfg;
  std::string data_dir;
  std::string out_dir;
  std::string seed;

  void setup(CLI::App& app) {
    cfg.add_to(app);
    app.add_option("--data", data_dir, "Corpus directory (with manifest.txt)")->required();
    app.add_option("--out", out_dir, "Run directory for logs and checkpoints")->required();
    app.add_option("--seed", seed, "Sets train.seed and model.seed");
    cfg.add_flag(app, "--stage", "train.stage", "end2end | global | local | staged");
    cfg.add_flag(app, "--epochs", "train.epochs", "End-to-end epochs");
    cfg.add_flag(app, "--global-epochs", "train.global_epochs", "Global-stage epochs (staged)");
    cfg.add_flag(app, "--local-epochs", "train.local_epochs", "Local-stage epochs (staged)");
    cfg.add_flag(app, "--lr", "train.lr", "Adam learning rate");
    cfg.add_flag(app, "--batch-size", "train.batch_size", "Mini-batch size");
    cfg.add_flag(app, "--variant", "model.variant", "fusion | local-only | global-only");
    cfg.add_flag(app, "--checkpoint-every", "train.checkpoint_every", "Snapshot every N epochs (0: never)");
  }

  int run(std::ostream& out, std::ostream& err) const {
    auto config = cfg.resolve();
    if (!seed.empty()) {
      apply_setting(config, "train.seed", seed);
      apply_setting(config, "model.seed", seed);
    }
    config.train.validate();
    const fs::path dir(out_dir);
    ensure_dir(dir);
    const auto config_text = to_config_text(config);
    write_text(dir / "config.txt", config_text);

    Model model(config.model);
    save_checkpoint(dir / "init.ckpt", config_text, model.state());
    const auto& tc = config.train;
    const bool staged = tc.stage == TrainStage::staged;
    int total = 0;
    switch (tc.stage) {
      case TrainStage::end2end: total = tc.epochs; break;
      case TrainStage::global: total = tc.global_epochs; break;
      case TrainStage::local: total = tc.local_epochs; break;
      case TrainStage::staged: total = tc.global_epochs + tc.local_epochs + tc.epochs; break;
    }
    if (total == 0) {
      out << "no epochs requested; wrote " << (dir / "init.ckpt").string() << "\n";
      return kExitOk;
    }

    const auto train = load_split(data_dir, "train", tc.crop_rows);
    const auto val = load_split(data_dir, "val", tc.crop_rows);
    if (train.empty()) throw ConfigError("corpus has no train samples: " + data_dir);
    if (val.empty()) throw ConfigError("corpus has no val samples: " + data_dir);
    out << "train " << train.size() << " / val " << val.size() << " samples, " << count_params(model.state().params)
        << " parameters\n";

    std::ofstream log(dir / "train_log.jsonl", std::ios::binary);
    if (!log) throw IoError("cannot write " + (dir / "train_log.jsonl").string());
    TrainHooks<float> hooks;
    hooks.on_epoch = [&](const EpochLog& entry, Model& m) {
      log << to_json_line(entry) << "\n";
      log.flush();
      out << entry.stage << " epoch " << entry.epoch << ": loss " << fixed(entry.train_loss, 4) << ", val rmse "
          << fixed(entry.val_rmse_mm, 1) << " mm, mae " << fixed(entry.val_mae_mm, 1) << " mm"
          << (entry.best ? " *" : "") << "\n";
      if (entry.best) save_checkpoint(dir / "best.ckpt", config_text, m.state());
      if (tc.checkpoint_every > 0 && (entry.epoch + 1) % tc.checkpoint_every == 0) {
        char name[64];
        std::snprintf(name, sizeof name, "%s_epoch_%03d.ckpt", entry.stage.c_str(), entry.epoch + 1);
        save_checkpoint(dir / name, config_text, m.state());
      }
    };
    hooks.on_stage_end = [&](const std::string& stage, Model& m) {
      if (staged) save_checkpoint(dir / ("stage_" + stage + ".ckpt"), config_text, m.state());
    };
    try {
      staged_training(model, train, val, tc, hooks);
    } catch (const NonFiniteLoss& e) {
      err << "error: non-finite loss at epoch " << e.epoch() << ", batch " << e.batch() << ", term " << e.term()
          << ": " << e.what() << "\n";
      return kExitNumeric;
    }
    save_checkpoint(dir / "final.ckpt", config_text, model.state());
    out << "wrote " << (dir / "final.ckpt").string() << "\n";
    return kExitOk;
  }
};

// ---------------------------------------------------------------- eval

Json metrics_json(const DepthMetrics& m) {
  return Json{{"rmse_mm", m.rmse_mm}, {"mae_mm", m.mae_mm}, {"valid_pixels", m.valid_pixels}};
}

Json optional_metrics_json(const std::optional<DepthMetrics>& m) { return m ? metrics_json(*m) : Json(nullptr); }

std::string target_name(EvalTarget t) { return to_string(t); }

/// Predictions equal to the ground truth: a sanity check of the metric path.
EvalResult oracle_result(const std::vector<SceneSample>& samples) {
  EvalResult result;
  MetricAccumulator total;
  for (const auto& s : samples) {
    const auto mask = valid_mask(s.gt);
    total.add(s.gt.values, s.gt.values, mask.values);
    result.samples.push_back({s.id, depth_metrics(s.gt.values, s.gt.values, mask.values), std::nullopt});
  }
  result.aggregate = total.result();
  return result;
}

struct EvalCmd {
  std::string checkpoint;
  std::string data_dir;
  std::string split = "val";
  std::string ablate;
  std::string out_dir;
  bool oracle = false;
  int batch_size = 4;
  int crop_rows = -1;

  void setup(CLI::App& app) {
    app.add_option("--checkpoint", checkpoint, "Model checkpoint");
    app.add_option("--data", data_dir, "Corpus directory")->required();
    app.add_option("--split", split, "train | val | all");
    app.add_option("--ablate", ablate, "Evaluate one output only: fused | local-only | global-only");
    app.add_option("--out", out_dir, "Directory for report.json / report.txt")->required();
    app.add_flag("--oracle", oracle, "Score the ground truth against itself (no checkpoint needed)");
    app.add_option("--batch-size", batch_size, "Inference batch size");
    app.add_option("--crop-rows", crop_rows, "Bottom crop; default is the checkpoint's train.crop_rows");
  }

  int run(std::ostream& out) const {
    if (!oracle && checkpoint.empty()) throw ConfigError("eval needs --checkpoint (or --oracle)");
    if (batch_size < 1) throw ConfigError("--batch-size must be >= 1");
    if (!oracle && !fs::exists(checkpoint)) throw IoError("checkpoint not found: " + checkpoint);

    RunConfig config;
    std::optional<Model> model;
    if (!oracle) model.emplace(load_model(checkpoint, &config));
    const int crop = crop_rows >= 0 ? crop_rows : config.train.crop_rows;
    const auto samples = load_split(data_dir, split, crop);
    if (samples.empty()) throw ConfigError("split '" + split + "' of " + data_dir + " is empty");

    std::vector<std::pair<std::string, EvalResult>> results;
    if (oracle) {
      results.emplace_back("oracle", oracle_result(samples));
    } else {
      std::vector<EvalTarget> targets;
      if (!ablate.empty()) {
        targets.push_back(parse_eval_target(ablate));
      } else {
        if (model->has_global() && model->has_local()) targets.push_back(EvalTarget::fused);
        if (model->has_global()) targets.push_back(EvalTarget::global);
        if (model->has_local()) targets.push_back(EvalTarget::local);
      }
      for (auto t : targets) {
        if ((t == EvalTarget::global && !model->has_global()) || (t == EvalTarget::local && !model->has_local()) ||
            (t == EvalTarget::fused && !(model->has_global() && model->has_local()))) {
          throw ConfigError("model variant " + to_string(config.model.variant) + " has no '" + target_name(t) +
                            "' output");
        }
        results.emplace_back(target_name(t), evaluate(*model, samples, t, batch_size));
      }
    }

    Json report;
    report["split"] = split;
    report["samples"] = samples.size();
    report["model_variant"] = oracle ? std::string("oracle") : to_string(config.model.variant);
    Json rows = Json::array();
    std::ostringstream text;
    text << "split " << split << ", " << samples.size() << " samples\n\n";
    text << std::left << std::setw(14) << "target" << std::right << std::setw(14) << "rmse_mm" << std::setw(14)
         << "mae_mm" << std::setw(20) << "artifact_rmse_mm" << std::setw(14) << "pixels" << "\n";
    for (const auto& [name, r] : results) {
      Json per = Json::array();
      for (const auto& s : r.samples) {
        Json entry = metrics_json(s.gt);
        entry["id"] = s.id;
        entry["artifact"] = optional_metrics_json(s.artifact);
        per.push_back(std::move(entry));
      }
      rows.push_back(Json{{"target", name},
                          {"aggregate", metrics_json(r.aggregate)},
                          {"artifact_aggregate", optional_metrics_json(r.artifact_aggregate)},
                          {"per_sample", std::move(per)}});
      text << std::left << std::setw(14) << name << std::right << std::setw(14) << fixed(r.aggregate.rmse_mm, 3)
           << std::setw(14) << fixed(r.aggregate.mae_mm, 3) << std::setw(20)
           << (r.artifact_aggregate ? fixed(r.artifact_aggregate->rmse_mm, 3) : std::string("-")) << std::setw(14)
           << r.aggregate.valid_pixels << "\n";
    }
    report["results"] = std::move(rows);
    for (const auto& [name, r] : results) {
      text << "\n[" << name << "]\n";
      for (const auto& s : r.samples) {
        text << s.id << "  rmse " << fixed(s.gt.rmse_mm, 3) << "  mae " << fixed(s.gt.mae_mm, 3) << "  pixels "
             << s.gt.valid_pixels;
        if (s.artifact) text << "  artifact_rmse " << fixed(s.artifact->rmse_mm, 3);
        text << "\n";
      }
    }

    const fs::path dir(out_dir);
    ensure_dir(dir);
    std::ostringstream echo;
    if (!oracle) echo << to_config_text(config);
    echo << "eval.checkpoint = " << (oracle ? std::string("-") : checkpoint) << "\n"
         << "eval.data = " << data_dir << "\n"
         << "eval.split = " << split << "\n"
         << "eval.ablate = " << (ablate.empty() ? std::string("all") : ablate) << "\n"
         << "eval.oracle = " << (oracle ? "true" : "false") << "\n"
         << "eval.crop_rows = " << crop << "\n";
    write_text(dir / "config.txt", echo.str());
    write_text(dir / "report.json", report.dump(2) + "\n");
    write_text(dir / "report.txt", text.str());
    for (const auto& [name, r] : results) {
      out << name << ": rmse " << fixed(r.aggregate.rmse_mm, 3) << " mm, mae " << fixed(r.aggregate.mae_mm, 3)
          << " mm";
      if (r.artifact_aggregate) out << ", artifact rmse " << fixed(r.artifact_aggregate->rmse_mm, 3) << " mm";
      out << "\n";
    }
    out << "report: " << (dir / "report.json").string() << "\n";
    return kExitOk;
  }
};

// ---------------------------------------------------------------- complete

struct CompleteCmd {
  std::string checkpoint;
  std::string rgb_path;
  std::string lidar_path;
  std::string truth_path;
  std::string out_path;
  std::string vis_path;
  double vis_max = 80.0;

  void setup(CLI::App& app) {
    app.add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
    app.add_option("--rgb", rgb_path, "RGB image (PNG or binary PPM)")->required();
    app.add_option("--lidar", lidar_path, "Sparse depth PNG (16-bit, 1/256 m)")->required();
    app.add_option("--truth", truth_path, "Optional dense ground truth PNG for an RMSE report");
    app.add_option("--out", out_path, "Completed 16-bit depth PNG")->required();
    app.add_option("--vis", vis_path, "Colour visualization PNG (default: <out>_vis.png)");
    app.add_option("--vis-max", vis_max, "Depth in metres mapped to the top of the palette");
  }

  int run(std::ostream& out) const {
    if (!fs::exists(checkpoint)) throw IoError("checkpoint not found: " + checkpoint);
    if (!(vis_max > 0.0)) throw ConfigError("--vis-max must be > 0");
    RunConfig config;
    auto model = load_model(checkpoint, &config);
    SceneSample sample;
    sample.rgb = read_rgb(rgb_path);
    sample.lidar = read_depth_png(lidar_path);
    if (!sample.lidar.same_size(sample.rgb.rows, sample.rgb.cols)) {
      throw AlignmentError("rgb is " + std::to_string(sample.rgb.rows) + "x" + std::to_string(sample.rgb.cols) +
                           " but lidar is " + std::to_string(sample.lidar.rows) + "x" +
                           std::to_string(sample.lidar.cols));
    }
    sample.gt = DepthMap(sample.rgb.rows, sample.rgb.cols, 0.0);

    const auto t0 = std::chrono::steady_clock::now();
    const auto prediction = predict(model, sample);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

    DepthMap depth = model.has_global() && model.has_local() ? prediction.fused
                     : model.has_local()                    ? prediction.local
                                                            : prediction.global;
    for (auto& v : depth.values) v = std::clamp(v, 1.0 / 256.0, kMaxPngDepth);
    const fs::path target(out_path);
    if (target.has_parent_path()) ensure_dir(target.parent_path());
    write_depth_png(depth, target);
    fs::path vis = vis_path;
    if (vis.empty()) vis = target.parent_path() / (target.stem().string() + "_vis.png");
    export_visualization(depth, vis, ColorScale{0.0, vis_max});

    out << "checkpoint: " << checkpoint << " (" << to_string(config.model.variant) << ")\n"
        << "size: " << depth.rows << "x" << depth.cols << "\n"
        << "inference: " << fixed(ms, 2) << " ms\n"
        << "depth: " << target.string() << "\n"
        << "visualization: " << vis.string() << "\n";
    if (!truth_path.empty()) {
      const auto truth = read_depth_png(truth_path);
      if (!truth.same_size(depth.rows, depth.cols)) throw AlignmentError("truth size differs from the inputs");
      const auto m = depth_metrics(depth.values, truth.values, valid_mask(truth).values);
      out << "rmse vs truth: " << fixed(m.rmse_mm, 3) << " mm, mae " << fixed(m.mae_mm, 3) << " mm\n";
    }
    return kExitOk;
  }
};

// ---------------------------------------------------------------- gradcheck

struct GradcheckCmd {
  GradcheckOptions options;

  void setup(CLI::App& app) {
    app.add_option("--seed", options.seed, "Seed of the random inputs");
    app.add_option("--samples", options.samples_per_tensor, "Elements probed per tensor (0: all)");
    app.add_option("--tolerance", options.tolerance, "Maximum relative error");
    app.add_flag("--inject-fault", options.inject_fault, "Add an op with a deliberately wrong backward rule");
  }

  int run(std::ostream& out) const {
    if (options.samples_per_tensor < 0) throw ConfigError("--samples must be >= 0");
    const auto report = run_gradcheck_suite(options);
    std::size_t width = 0;
    for (const auto& c : report.cases) width = std::max(width, c.name.size());
    for (const auto& c : report.cases) {
      char err[32];
      std::snprintf(err, sizeof err, "%.3e", c.max_rel_err);
      out << std::left << std::setw(static_cast<int>(width) + 2) << c.name << std::right << std::setw(7) << c.checked
          << "  max_rel_err " << err << "  " << (c.passed ? "PASS" : "FAIL") << "\n";
    }
    const auto failed = std::count_if(report.cases.begin(), report.cases.end(), [](auto& c) { return !c.passed; });
    out << report.cases.size() - failed << "/" << report.cases.size() << " passed (tolerance " << options.tolerance
        << ", " << fixed(report.seconds, 2) << " s)\n";
    return report.passed() ? kExitOk : kExitCheckFailed;
  }
};

int exit_code_for(const Error& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const InvalidScene*>(&e)) return kExitConfig;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const FormatError*>(&e)) return kExitIo;
  if (dynamic_cast<const AlignmentError*>(&e)) return kExitAlignment;
  if (dynamic_cast<const NonFinite*>(&e) || dynamic_cast<const NonFiniteLoss*>(&e) ||
      dynamic_cast<const RangeError*>(&e)) {
    return kExitNumeric;
  }
  return kExitCheckFailed;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Depth completion from sparse LiDAR and RGB with confidence-weighted fusion", "fusiondepth"};
  app.require_subcommand(1);
  SimulateCmd simulate;
  TrainCmd train;
  EvalCmd eval;
  CompleteCmd complete;
  GradcheckCmd gradcheck;
  auto* sim_app = app.add_subcommand("simulate", "Generate a synthetic corpus");
  auto* train_app = app.add_subcommand("train", "Train a model on a corpus");
  auto* eval_app = app.add_subcommand("eval", "Score a checkpoint on a corpus split");
  auto* complete_app = app.add_subcommand("complete", "Complete one frame");
  auto* grad_app = app.add_subcommand("gradcheck", "Check every backward rule against finite differences");
  simulate.setup(*sim_app);
  train.setup(*train_app);
  eval.setup(*eval_app);
  complete.setup(*complete_app);
  gradcheck.setup(*grad_app);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*sim_app) return simulate.run(out);
    if (*train_app) return train.run(out, err);
    if (*eval_app) return eval.run(out);
    if (*complete_app) return complete.run(out);
    if (*grad_app) return gradcheck.run(out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  }
  return kExitConfig;
}

}  // namespace fusiondepth

#include <doctest.h>

#include <cmath>

#include "fusiondepth/loss.hpp"
#include "fusiondepth/simdata.hpp"
#include "fusiondepth/train.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace fusiondepth;
using TensorD = Tensor<double>;

namespace {

std::vector<SceneSample> tiny_corpus(int count, std::uint64_t seed) {
  SceneSpec base;
  base.rows = 16;
  base.cols = 48;
  std::vector<SceneSample> out;
  for (int i = 0; i < count; ++i) out.push_back(make_sample(random_scene(base, derive_seed(seed, i)), sample_id(i)));
  return out;
}

ModelConfig tiny_model(ModelVariant variant = ModelVariant::fusion) {
  ModelConfig c;
  c.variant = variant;
  c.global_widths = {4, 8};
  c.local_width = 4;
  return c;
}

TrainConfig tiny_train(int epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 2;
  return t;
}

void set_grad(TensorD& p, double g) {
  p.clear_grad();
  p.zero_grad();
  Tape<double> tape;
  TapeScope<double> scope(tape);
  backward(mul_scalar(sum(p), g), tape);
}

template <typename T>
std::vector<std::vector<double>> snapshot(const std::vector<NamedTensor<T>>& list) {
  std::vector<std::vector<double>> out;
  for (const auto& t : list) out.push_back(testing::values(t.tensor));
  return out;
}

}  // namespace

TEST_SUITE("adam") {
  TEST_CASE("three steps match the hand-written recursion") {
    auto p = TensorD::from_data({1}, {0.5}).set_requires_grad(true);
    AdamState<double> state;
    const AdamOptions opts{0.01, 0.9, 0.999, 1e-8, false};
    oracle::ScalarAdam ref{0.01, 0.9, 0.999, 1e-8};
    double expected = 0.5;
    for (double g : {0.3, -1.2, 2.5}) {
      set_grad(p, g);
      adam_step<double>({p}, state, opts);
      expected = ref.step(expected, g);
      CHECK(p.data()[0] == doctest::Approx(expected).epsilon(1e-12));
    }
    CHECK(state.step == 3);
  }

  TEST_CASE("constant gradient gives steps of size lr") {
    auto p = TensorD::from_data({1}, {0.0}).set_requires_grad(true);
    AdamState<double> state;
    const AdamOptions opts{1e-3, 0.9, 0.999, 1e-8, false};
    double prev = 0.0;
    for (int i = 0; i < 200; ++i) {
      set_grad(p, 7.0);
      adam_step<double>({p}, state, opts);
      const double delta = prev - p.data()[0];
      CHECK(delta == doctest::Approx(1e-3).epsilon(1e-6));
      prev = p.data()[0];
    }
  }

  TEST_CASE("zero gradients leave parameters alone while moments decay") {
    auto p = TensorD::from_data({1}, {1.0}).set_requires_grad(true);
    AdamState<double> state;
    const AdamOptions opts;
    set_grad(p, 1.0);
    adam_step<double>({p}, state, opts);
    const double m1 = state.m[0][0], v1 = state.v[0][0];
    set_grad(p, 0.0);
    adam_step<double>({p}, state, opts);
    CHECK(state.m[0][0] == doctest::Approx(0.9 * m1));
    CHECK(state.v[0][0] == doctest::Approx(0.999 * v1));
    auto q = TensorD::from_data({1}, {2.0}).set_requires_grad(true);
    AdamState<double> fresh;
    set_grad(q, 0.0);
    adam_step<double>({q}, fresh, opts);
    CHECK(q.data()[0] == 2.0);
    CHECK(fresh.m[0][0] == 0.0);
    CHECK(fresh.v[0][0] == 0.0);
  }

  TEST_CASE("missing gradients") {
    auto p = TensorD::from_data({1}, {1.0}).set_requires_grad(true);
    AdamState<double> state;
    CHECK_THROWS_AS(adam_step<double>({p}, state, AdamOptions{}), MissingGradient);
    AdamOptions skip;
    skip.skip_missing = true;
    adam_step<double>({p}, state, skip);
    CHECK(p.data()[0] == 1.0);
  }
}

TEST_SUITE("augment") {
  TEST_CASE("flips are involutions that move pixels consistently") {
    const auto s = tiny_corpus(1, 5)[0];
    for (auto axis : {FlipAxis::mirror, FlipAxis::upside_down}) {
      const auto f = flip_sample(s, axis);
      CHECK(flip_sample(f, axis) == s);
      CHECK(fill_ratio(f.lidar) == fill_ratio(s.lidar));
      CHECK(fill_ratio(f.gt) == fill_ratio(s.gt));
      for (int r = 0; r < s.rows(); ++r)
        for (int c = 0; c < s.cols(); ++c) {
          const int mr = axis == FlipAxis::mirror ? r : s.rows() - 1 - r;
          const int mc = axis == FlipAxis::mirror ? s.cols() - 1 - c : c;
          REQUIRE(f.lidar.at(r, c) == s.lidar.at(mr, mc));
          REQUIRE(f.gt.at(r, c) == s.gt.at(mr, mc));
          REQUIRE(f.dense_truth->at(r, c) == s.dense_truth->at(mr, mc));
          REQUIRE(f.artifact_mask->at(r, c) == s.artifact_mask->at(mr, mc));
          REQUIRE(f.rgb.at(1, r, c) == s.rgb.at(1, mr, mc));
        }
    }
  }

  TEST_CASE("flip probability extremes") {
    const auto s = tiny_corpus(1, 6)[0];
    Rng rng(1);
    TrainConfig never;
    never.flip_prob = 0.0;
    CHECK(augment(s, rng, never) == s);
    TrainConfig always;
    always.flip_prob = 1.0;
    CHECK(augment(s, rng, always) == flip_sample(s, FlipAxis::mirror));
    CHECK(parse_flip_axis("upside-down") == FlipAxis::upside_down);
    CHECK_THROWS_AS(parse_flip_axis("diagonal"), ConfigError);
  }

  TEST_CASE("batches stack aligned samples only") {
    auto corpus = tiny_corpus(2, 7);
    auto b = make_batch<float>({&corpus[0], &corpus[1]});
    CHECK(b.rgb.shape() == Shape{2, 3, 16, 48});
    CHECK(b.mask.data()[0] == (corpus[0].gt.values[0] > 0.0 ? 1.0f : 0.0f));
    corpus[1].lidar = DepthMap(8, 48);
    CHECK_THROWS_AS(make_batch<float>({&corpus[0], &corpus[1]}), AlignmentError);
  }
}

TEST_SUITE("train") {
  TEST_CASE("config validation") {
    TrainConfig c;
    c.learning_rate = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.flip_prob = 1.5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }

  TEST_CASE("zero epochs change nothing") {
    const auto corpus = tiny_corpus(4, 8);
    FusionNet<float> net(tiny_model());
    const auto before = snapshot(net.state().params);
    const auto r = train_loop(net, corpus, corpus, tiny_train(0), Objective::composite, 0, "end2end");
    CHECK(r.epochs.empty());
    CHECK(snapshot(net.state().params) == before);
  }

  TEST_CASE("same config and seed give the same loss curve") {
    const auto corpus = tiny_corpus(6, 9);
    std::vector<double> losses[2];
    for (int run = 0; run < 2; ++run) {
      FusionNet<float> net(tiny_model());
      losses[run] = train_loop(net, corpus, corpus, tiny_train(2), Objective::composite, 2, "end2end").batch_losses;
    }
    CHECK(losses[0].size() == 6);
    CHECK(losses[0] == losses[1]);
  }

  TEST_CASE("the first epoch optimises plain MSE") {
    const auto corpus = tiny_corpus(4, 10);
    FusionNet<double> net(tiny_model());
    TrainHooks<double> hooks;
    int checked = 0;
    hooks.on_batch = [&](const BatchEvent<double>& e) {
      if (e.epoch != 0) return;
      const auto& b = e.batch_data;
      const auto& o = e.output;
      const double mse = 0.1 * masked_mse(o.d_global, b.gt, b.mask).item() +
                         0.1 * masked_mse(o.d_local, b.gt, b.mask).item() + masked_mse(o.d_out, b.gt, b.mask).item();
      CHECK(e.loss == doctest::Approx(mse).epsilon(1e-12));
      ++checked;
    };
    train_loop(net, corpus, corpus, tiny_train(2), Objective::composite, 2, "end2end", hooks);
    CHECK(checked == 2);
  }

  TEST_CASE("epoch log carries validation metrics and marks the best epoch") {
    const auto corpus = tiny_corpus(4, 11);
    FusionNet<float> net(tiny_model());
    const auto r = train_loop(net, corpus, corpus, tiny_train(3), Objective::composite, 3, "end2end");
    REQUIRE(r.epochs.size() == 3);
    for (const auto& e : r.epochs) {
      CHECK(std::isfinite(e.train_loss));
      CHECK(e.val_mae_mm <= e.val_rmse_mm);
      CHECK(e.val_artifact_rmse_mm.has_value());
    }
    CHECK(r.epochs[static_cast<std::size_t>(r.best_epoch)].best);
    const auto line = to_json_line(r.epochs[0]);
    CHECK(line.find("\"val_rmse_mm\"") != std::string::npos);
    CHECK(line.find("\"wall_time_s\"") != std::string::npos);
  }

  TEST_CASE("staged training: the local stage leaves the global branch bit-identical") {
    const auto corpus = tiny_corpus(4, 12);
    FusionNet<float> net(tiny_model());
    TrainConfig cfg = tiny_train(1);
    cfg.stage = TrainStage::staged;
    cfg.global_epochs = 1;
    cfg.local_epochs = 1;
    std::vector<std::vector<double>> global_after_stage1, global_after_stage2, local_after_stage1,
        local_after_stage2;
    std::vector<std::string> stages;
    TrainHooks<float> hooks;
    hooks.on_stage_end = [&](const std::string& stage, FusionNet<float>& m) {
      stages.push_back(stage);
      auto g = snapshot(m.global_state().params), gb = snapshot(m.global_state().buffers);
      g.insert(g.end(), gb.begin(), gb.end());
      auto l = snapshot(m.local_state().params), lb = snapshot(m.local_state().buffers);
      l.insert(l.end(), lb.begin(), lb.end());
      if (stage == "global") {
        global_after_stage1 = g;
        local_after_stage1 = l;
      }
      if (stage == "local") {
        global_after_stage2 = g;
        local_after_stage2 = l;
      }
    };
    const auto local_init = snapshot(net.local_state().params);
    const auto r = staged_training(net, corpus, corpus, cfg, hooks);
    CHECK(stages == std::vector<std::string>{"global", "local", "end2end"});
    CHECK(r.stages.size() == 3);
    CHECK(global_after_stage1 == global_after_stage2);
    CHECK(local_after_stage1 != local_after_stage2);
    CHECK(snapshot(net.local_state().params) != local_init);
    CHECK_FALSE(net.global_frozen());
    CHECK_FALSE(net.local_frozen());
  }

  TEST_CASE("single-branch models train on their own output") {
    const auto corpus = tiny_corpus(4, 13);
    for (auto v : {ModelVariant::local_only, ModelVariant::global_only}) {
      FusionNet<float> net(tiny_model(v));
      const auto before = snapshot(net.state().params);
      train_loop(net, corpus, corpus, tiny_train(1), Objective::composite, 1, "end2end");
      CHECK(snapshot(net.state().params) != before);
    }
  }

  TEST_CASE("a diverging run aborts with the offending term") {
    const auto corpus = tiny_corpus(4, 14);
    FusionNet<float> net(tiny_model());
    TrainConfig cfg = tiny_train(20);
    cfg.learning_rate = 1e30;
    cfg.restore_best = false;
    bool thrown = false;
    try {
      train_loop(net, corpus, corpus, cfg, Objective::composite, 20, "end2end");
    } catch (const NonFiniteLoss& e) {
      thrown = true;
      CHECK(e.epoch() >= 0);
      CHECK(e.batch() >= 0);
      CHECK_FALSE(e.term().empty());
    }
    CHECK(thrown);
  }

  TEST_CASE("evaluation pools pixels and reports artifact metrics") {
    const auto corpus = tiny_corpus(3, 15);
    FusionNet<float> net(tiny_model());
    for (auto target : {EvalTarget::fused, EvalTarget::global, EvalTarget::local}) {
      const auto r = evaluate(net, corpus, target, 2);
      REQUIRE(r.samples.size() == 3);
      double se = 0.0;
      std::int64_t n = 0;
      for (const auto& s : r.samples) {
        se += s.gt.rmse_mm * s.gt.rmse_mm * static_cast<double>(s.gt.valid_pixels);
        n += s.gt.valid_pixels;
      }
      CHECK(r.aggregate.valid_pixels == n);
      CHECK(r.aggregate.rmse_mm == doctest::Approx(std::sqrt(se / static_cast<double>(n))).epsilon(1e-9));
      CHECK(r.artifact_aggregate.has_value());
    }
    CHECK(parse_eval_target("global-only") == EvalTarget::global);
  }
}

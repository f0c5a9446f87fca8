#include <doctest.h>

#include "fusiondepth/checkpoint.hpp"
#include "fusiondepth/config.hpp"
#include "fusiondepth/model.hpp"
#include "helpers.hpp"

using namespace fusiondepth;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.global_widths = {4, 8};
  c.local_width = 4;
  return c;
}

}  // namespace

TEST_SUITE("checkpoint") {
  TEST_CASE("round trip restores every parameter and buffer") {
    testing::TempDir dir("ckpt");
    FusionNet<float> a(tiny_model());
    a.state().buffers[0].tensor.data()[0] = 3.25f;
    save_checkpoint(dir / "a.ckpt", "model.local_width = 4\n", a.state());
    const auto ck = load_checkpoint(dir / "a.ckpt");
    CHECK(ck.version == kCheckpointVersion);
    CHECK(ck.config_text == "model.local_width = 4\n");
    CHECK(ck.entries.size() == a.state().params.size() + a.state().buffers.size());

    auto other = tiny_model();
    other.seed = 99;
    FusionNet<float> b(other);
    apply_checkpoint(ck, b.state());
    const auto sa = a.state(), sb = b.state();
    for (std::size_t i = 0; i < sa.params.size(); ++i) {
      CHECK(testing::values(sa.params[i].tensor) == testing::values(sb.params[i].tensor));
    }
    CHECK(sb.buffers[0].tensor.data()[0] == 3.25f);
  }

  TEST_CASE("double precision values survive") {
    testing::TempDir dir("ckpt64");
    FusionNet<double> a(tiny_model());
    a.state().params[0].tensor.data()[0] = 0.1;
    save_checkpoint(dir / "a.ckpt", "", a.state());
    FusionNet<double> b(tiny_model());
    apply_checkpoint(load_checkpoint(dir / "a.ckpt"), b.state());
    CHECK(b.state().params[0].tensor.data()[0] == 0.1);
  }

  TEST_CASE("mismatched models and damaged files are rejected") {
    testing::TempDir dir("ckptbad");
    FusionNet<float> a(tiny_model());
    save_checkpoint(dir / "a.ckpt", "", a.state());
    const auto ck = load_checkpoint(dir / "a.ckpt");

    auto wider = tiny_model();
    wider.local_width = 6;
    FusionNet<float> b(wider);
    CHECK_THROWS_AS(apply_checkpoint(ck, b.state()), FormatError);

    auto local_cfg = tiny_model();
    local_cfg.variant = ModelVariant::local_only;
    FusionNet<float> local(local_cfg);
    apply_checkpoint(ck, local.state());  // a subset of names is fine

    const auto bytes = testing::read_file(dir / "a.ckpt");
    testing::write_file(dir / "trunc.ckpt", bytes.substr(0, bytes.size() - 7));
    CHECK_THROWS_AS(load_checkpoint(dir / "trunc.ckpt"), FormatError);
    testing::write_file(dir / "tail.ckpt", bytes + "x");
    CHECK_THROWS_AS(load_checkpoint(dir / "tail.ckpt"), FormatError);
    testing::write_file(dir / "magic.ckpt", "NOTACKPT" + bytes.substr(8));
    CHECK_THROWS_AS(load_checkpoint(dir / "magic.ckpt"), FormatError);
    CHECK_THROWS_AS(load_checkpoint(dir / "none.ckpt"), IoError);
  }
}

TEST_SUITE("config") {
  TEST_CASE("defaults echo and parse back to the same text") {
    RunConfig c;
    const auto text = to_config_text(c);
    RunConfig d;
    apply_config_text(d, text);
    CHECK(to_config_text(d) == text);
    const auto keys = config_keys();
    for (const auto& k : keys) CHECK(text.find(k + " = ") != std::string::npos);
  }

  TEST_CASE("every key round-trips a non-default value") {
    RunConfig c;
    apply_config_text(c, R"(
      # comment line
      scene.count = 12
      scene.seed = 9
      scene.h = 48        # alias of scene.rows
      scene.w = 144
      scene.artifact.count = 7
      scene.lidar.lines = 20
      scene.ground_albedo = 0.1, 0.2, 0.3
      model.variant = local-only
      model.global_widths = 8,16
      train.lr = 0.0005
      train.flip_axis = upside-down
      train.focal_gradient = full
      train.stage = staged
      train.restore_best = false
    )");
    CHECK(c.corpus.count == 12);
    CHECK(c.scene.rows == 48);
    CHECK(c.scene.cols == 144);
    CHECK(c.scene.artifacts.count == 7);
    CHECK(c.scene.scanlines.lines == 20);
    CHECK(c.scene.ground_albedo.y == 0.2);
    CHECK(c.model.variant == ModelVariant::local_only);
    CHECK(c.model.global_widths == std::vector<int>{8, 16});
    CHECK(c.train.learning_rate == 0.0005);
    CHECK(c.train.flip_axis == FlipAxis::upside_down);
    CHECK(c.train.focal == FocalGradient::full);
    CHECK(c.train.stage == TrainStage::staged);
    CHECK_FALSE(c.train.restore_best);
    RunConfig d;
    apply_config_text(d, to_config_text(c));
    CHECK(to_config_text(d) == to_config_text(c));
  }

  TEST_CASE("errors name the origin and line") {
    RunConfig c;
    try {
      apply_config_text(c, "train.lr = 1e-3\ntrain.bogus = 1\n", "run.cfg");
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("run.cfg:2") != std::string::npos);
    }
    CHECK_THROWS_AS(apply_setting(c, "train.batch_size", "four"), ConfigError);
    CHECK_THROWS_AS(apply_setting(c, "train.batch_size", "4x"), ConfigError);
    CHECK_THROWS_AS(apply_config_text(c, "no equals sign\n"), ConfigError);
    CHECK_THROWS_AS(apply_config_file(c, "/nonexistent/run.cfg"), IoError);
  }
}

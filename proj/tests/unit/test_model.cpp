#include <doctest.h>

#include <cmath>
#include <set>

#include "fusiondepth/model.hpp"
#include "fusiondepth/nn.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace fusiondepth;

namespace {

std::vector<std::int64_t> widths64(const std::vector<int>& w) { return {w.begin(), w.end()}; }

ModelConfig small_config(ModelVariant variant = ModelVariant::fusion) {
  ModelConfig c;
  c.variant = variant;
  c.global_widths = {4, 8, 8};
  c.local_width = 4;
  return c;
}

}  // namespace

TEST_SUITE("nn") {
  TEST_CASE("conv layer init stays inside the fan-in bound with zero bias") {
    Rng rng(3);
    Conv2d<double> conv(8, 16, 3, 1, 1, true);
    init_params(conv, rng);
    const double bound = init_bound(8 * 9);
    CHECK(conv.fan_in() == 72.0);
    double max_abs = 0.0;
    for (double v : conv.weight.data()) max_abs = std::max(max_abs, std::abs(v));
    CHECK(max_abs <= bound);
    CHECK(max_abs > 0.8 * bound);
    for (double v : conv.bias.data()) CHECK(v == 0.0);
  }

  TEST_CASE("layers expose parameters and buffers under their prefixes") {
    BatchNorm2d<double> bn(5);
    StateList<double> s;
    bn.collect("block.bn", s);
    REQUIRE(s.params.size() == 2);
    REQUIRE(s.buffers.size() == 2);
    CHECK(s.params[0].name == "block.bn.gamma");
    CHECK(count_params(s.params) == 10);
  }
}

TEST_SUITE("model") {
  TEST_CASE("reference-width local branch parameter count matches the closed form") {
    ModelConfig c;
    c.variant = ModelVariant::local_only;
    FusionNet<float> local(c);
    const auto expected = oracle::local_branch(32, false, true);
    CHECK(expected == 283171);
    CHECK(local.count_params() == expected);
    CHECK(local.count_params() >= 280000);
    CHECK(local.count_params() <= 420000);
  }

  TEST_CASE("full model parameter count is the sum of both branches") {
    for (const auto& widths : {std::vector<int>{16, 32, 64, 128}, std::vector<int>{8, 16}}) {
      for (bool skip : {false, true}) {
        ModelConfig c;
        c.global_widths = widths;
        c.local_width = 12;
        c.guidance_skip = skip;
        c.second_encoder_bn = !skip;
        FusionNet<float> net(c);
        CHECK(net.count_params() == oracle::global_branch(widths64(widths)) + oracle::local_branch(12, skip, !skip));
        CHECK(count_params(net.global_state().params) == oracle::global_branch(widths64(widths)));
      }
    }
  }

  TEST_CASE("variant names round-trip") {
    for (auto v : {ModelVariant::fusion, ModelVariant::local_only, ModelVariant::global_only}) {
      CHECK(parse_model_variant(to_string(v)) == v);
    }
    CHECK_THROWS_AS(parse_model_variant("both"), ConfigError);
  }

  TEST_CASE("state names are unique and single-branch variants omit the other branch") {
    FusionNet<float> net(small_config());
    std::set<std::string> names;
    const auto state = net.state();
    for (const auto& p : state.params) names.insert(p.name);
    for (const auto& b : state.buffers) names.insert(b.name);
    CHECK(names.size() == state.params.size() + state.buffers.size());

    FusionNet<float> local(small_config(ModelVariant::local_only));
    CHECK_FALSE(local.has_global());
    CHECK(local.has_local());
    FusionNet<float> global(small_config(ModelVariant::global_only));
    CHECK(global.has_global());
    CHECK_FALSE(global.has_local());
  }

  TEST_CASE("forward shapes on sizes that are not multiples of the stride") {
    Rng rng(4);
    FusionNet<double> net(small_config());
    for (auto [h, w] : {std::pair{8, 24}, std::pair{10, 13}}) {
      auto rgb = testing::random_tensor(rng, {2, 3, h, w}, 0.0, 1.0);
      auto lidar = testing::random_tensor(rng, {2, 1, h, w}, 0.0, 20.0);
      auto out = net.forward(rgb, lidar, false);
      for (const auto* t : {&out.d_out, &out.d_global, &out.d_local, &out.conf_global, &out.conf_local}) {
        CHECK(t->shape() == Shape{2, 1, h, w});
      }
    }
  }

  TEST_CASE("fused output lies between the branch predictions") {
    Rng rng(5);
    FusionNet<double> net(small_config());
    auto rgb = testing::random_tensor(rng, {1, 3, 8, 16}, 0.0, 1.0);
    auto lidar = testing::random_tensor(rng, {1, 1, 8, 16}, 0.0, 30.0);
    auto out = net.forward(rgb, lidar, false);
    for (std::int64_t i = 0; i < out.d_out.numel(); ++i) {
      const double g = out.d_global.data()[i], l = out.d_local.data()[i], o = out.d_out.data()[i];
      CHECK(o >= std::min(g, l));
      CHECK(o <= std::max(g, l));
    }
  }

  TEST_CASE("single-branch variants pass their branch through") {
    Rng rng(6);
    auto rgb = testing::random_tensor(rng, {1, 3, 8, 8}, 0.0, 1.0);
    auto lidar = testing::random_tensor(rng, {1, 1, 8, 8}, 0.0, 30.0);
    FusionNet<double> local(small_config(ModelVariant::local_only));
    auto lo = local.forward(rgb, lidar, false);
    CHECK(testing::values(lo.d_out) == testing::values(lo.d_local));
    FusionNet<double> global(small_config(ModelVariant::global_only));
    auto go = global.forward(rgb, lidar, false);
    CHECK(testing::values(go.d_out) == testing::values(go.d_global));
  }

  TEST_CASE("same seed builds identical weights") {
    FusionNet<float> a(small_config()), b(small_config());
    auto sa = a.state(), sb = b.state();
    for (std::size_t i = 0; i < sa.params.size(); ++i) {
      CHECK(testing::values(sa.params[i].tensor) == testing::values(sb.params[i].tensor));
    }
    auto c2 = small_config();
    c2.seed = 2;
    FusionNet<float> c(c2);
    CHECK(testing::values(c.state().params[0].tensor) != testing::values(sa.params[0].tensor));
  }

  TEST_CASE("freezing a branch removes it from the trainable set") {
    FusionNet<float> net(small_config());
    const auto all = net.trainable_parameters().size();
    net.set_global_frozen(true);
    CHECK(net.trainable_parameters().size() == all - net.global_state().params.size());
    net.set_global_frozen(false);
    net.set_local_frozen(true);
    CHECK(net.trainable_parameters().size() == all - net.local_state().params.size());
  }

  TEST_CASE("frozen branch keeps its batch norm statistics in training forward") {
    Rng rng(7);
    FusionNet<double> net(small_config());
    net.set_global_frozen(true);
    const auto before = net.global_state();
    std::vector<std::vector<double>> stats;
    for (const auto& b : before.buffers) stats.push_back(testing::values(b.tensor));
    auto rgb = testing::random_tensor(rng, {2, 3, 8, 8}, 0.0, 1.0);
    auto lidar = testing::random_tensor(rng, {2, 1, 8, 8}, 0.0, 30.0);
    net.forward(rgb, lidar, true);
    const auto after = net.global_state();
    for (std::size_t i = 0; i < stats.size(); ++i) CHECK(testing::values(after.buffers[i].tensor) == stats[i]);
  }

  TEST_CASE("invalid configurations are rejected") {
    auto c = small_config();
    c.local_width = 0;
    CHECK_THROWS_AS(FusionNet<float>{c}, ConfigError);
    c = small_config();
    c.global_widths = {};
    CHECK_THROWS_AS(FusionNet<float>{c}, ConfigError);
    FusionNet<double> net(small_config());
    CHECK_THROWS_AS(net.forward(Tensor<double>::zeros({1, 3, 8, 8}), Tensor<double>::zeros({1, 1, 8, 4}), false),
                    ShapeMismatch);
  }
}

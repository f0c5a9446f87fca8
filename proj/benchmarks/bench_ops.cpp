#include <benchmark/benchmark.h>

#include <filesystem>

#include "fusiondepth/kittiio.hpp"
#include "fusiondepth/loss.hpp"
#include "fusiondepth/model.hpp"
#include "fusiondepth/ops.hpp"
#include "fusiondepth/simdata.hpp"
#include "fusiondepth/train.hpp"

using namespace fusiondepth;

namespace {

Tensor<float> random_tensor(Rng& rng, Shape shape) {
  std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  return Tensor<float>::from_data(std::move(shape), std::move(v));
}

void BM_Conv3x3Forward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  Rng rng(1);
  const auto x = random_tensor(rng, {1, c, 64, 192});
  const auto w = random_tensor(rng, {c, c, 3, 3});
  const auto b = random_tensor(rng, {c});
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, b, 1, 1));
  state.SetItemsProcessed(state.iterations() * 64 * 192);
}
BENCHMARK(BM_Conv3x3Forward)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_Conv3x3ForwardBackward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  Rng rng(2);
  auto x = random_tensor(rng, {1, c, 64, 192});
  auto w = random_tensor(rng, {c, c, 3, 3});
  auto b = random_tensor(rng, {c});
  x.set_requires_grad(true);
  w.set_requires_grad(true);
  b.set_requires_grad(true);
  for (auto _ : state) {
    Tape<float> tape;
    TapeScope<float> scope(tape);
    backward(sum(conv2d(x, w, b, 1, 1)), tape);
  }
}
BENCHMARK(BM_Conv3x3ForwardBackward)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_TransposedConv2x2(benchmark::State& state) {
  Rng rng(3);
  const auto x = random_tensor(rng, {1, 64, 32, 96});
  const auto w = random_tensor(rng, {64, 32, 2, 2});
  const auto b = random_tensor(rng, {32});
  for (auto _ : state) benchmark::DoNotOptimize(conv_transpose2d(x, w, b, 2, 0));
}
BENCHMARK(BM_TransposedConv2x2)->Unit(benchmark::kMillisecond);

void BM_FusionNetInference(benchmark::State& state) {
  const auto sample = make_sample(random_scene(SceneSpec{}, 4), "bench");
  FusionNet<float> net(ModelConfig{});
  const auto batch = make_batch<float>({&sample});
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(batch.rgb, batch.lidar, false));
}
BENCHMARK(BM_FusionNetInference)->Unit(benchmark::kMillisecond);

void BM_FusionNetTrainStep(benchmark::State& state) {
  const auto sample = make_sample(random_scene(SceneSpec{}, 5), "bench");
  std::vector<SceneSample> data(static_cast<std::size_t>(state.range(0)), sample);
  FusionNet<float> net(ModelConfig{});
  TrainConfig tc;
  tc.batch_size = static_cast<int>(state.range(0));
  tc.restore_best = false;
  for (auto _ : state) train_loop(net, data, {}, tc, Objective::composite, 1, "end2end");
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_FusionNetTrainStep)->Arg(1)->Arg(4)->Unit(benchmark::kMillisecond);

void BM_RenderScene(benchmark::State& state) {
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(make_sample(random_scene(SceneSpec{}, seed++)));
}
BENCHMARK(BM_RenderScene)->Unit(benchmark::kMillisecond);

void BM_DepthPngRoundTrip(benchmark::State& state) {
  const auto dense = render_scene(random_scene(SceneSpec{}, 6)).dense_truth;
  const auto path = std::filesystem::temp_directory_path() / "fusiondepth_bench_depth.png";
  for (auto _ : state) {
    write_depth_png(dense, path);
    benchmark::DoNotOptimize(read_depth_png(path));
  }
  std::filesystem::remove(path);
}
BENCHMARK(BM_DepthPngRoundTrip)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();

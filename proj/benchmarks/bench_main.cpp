#include <random>

#include <benchmark/benchmark.h>
#include <torch/torch.h>

#include "mtmed3d/detection.hpp"
#include "mtmed3d/encoder.hpp"
#include "mtmed3d/metrics.hpp"
#include "mtmed3d/mtl_optim.hpp"

using namespace mtmed3d;

namespace {

std::vector<BoxF> random_boxes(int n, std::mt19937& rng) {
  std::uniform_real_distribution<double> p(0, 80), l(2, 20);
  std::vector<BoxF> out(n);
  for (auto& b : out)
    for (int k = 0; k < 3; ++k) {
      b.lo[k] = p(rng);
      b.hi[k] = b.lo[k] + l(rng);
    }
  return out;
}

}  // namespace

static void BM_WindowPartitionRoundtrip(benchmark::State& state) {
  const int64_t s = state.range(0);
  auto layout = encoder::AttentionWindowLayout::make({s, s, s}, 7, true);
  auto x = torch::randn({1, s, s, s, 48});
  for (auto _ : state) {
    auto w = encoder::window_partition(x, layout);
    benchmark::DoNotOptimize(encoder::window_reverse(w, layout, 1));
  }
}
BENCHMARK(BM_WindowPartitionRoundtrip)->Arg(24)->Arg(48);

static void BM_AttentionMask(benchmark::State& state) {
  const int64_t s = state.range(0);
  auto layout = encoder::AttentionWindowLayout::make({s, s, s}, 7, true);
  for (auto _ : state) benchmark::DoNotOptimize(encoder::attention_mask(layout, torch::kFloat));
}
BENCHMARK(BM_AttentionMask)->Arg(12)->Arg(24);

static void BM_Nms(benchmark::State& state) {
  std::mt19937 rng(1);
  auto boxes = random_boxes(static_cast<int>(state.range(0)), rng);
  std::vector<double> scores(boxes.size());
  std::uniform_real_distribution<double> u(0, 1);
  for (auto& s : scores) s = u(rng);
  for (auto _ : state) benchmark::DoNotOptimize(decoders::nms_3d(boxes, scores, 0.22));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_Nms)->RangeMultiplier(4)->Range(64, 4096)->Complexity();

static void BM_DistanceTransform(benchmark::State& state) {
  const int64_t s = state.range(0);
  torch::manual_seed(2);
  auto sites = (torch::rand({s, s, s}) < 0.01).to(torch::kUInt8);
  for (auto _ : state) benchmark::DoNotOptimize(metrics::squared_distance_transform(sites));
}
BENCHMARK(BM_DistanceTransform)->Arg(32)->Arg(64)->Arg(96);

static void BM_Hausdorff95(benchmark::State& state) {
  const int64_t s = state.range(0);
  torch::manual_seed(3);
  auto a = (torch::rand({s, s, s}) < 0.3).to(torch::kUInt8);
  auto b = (torch::rand({s, s, s}) < 0.3).to(torch::kUInt8);
  for (auto _ : state) benchmark::DoNotOptimize(metrics::hausdorff(a, b, 95.0));
}
BENCHMARK(BM_Hausdorff95)->Arg(32)->Arg(64);

static void BM_AveragePrecisionSweep(benchmark::State& state) {
  std::mt19937 rng(4);
  std::uniform_real_distribution<double> u(0, 1);
  const int cases = static_cast<int>(state.range(0));
  std::vector<std::vector<Detection>> dets(cases);
  std::vector<std::vector<BoxF>> gts(cases);
  for (int c = 0; c < cases; ++c) {
    gts[c] = random_boxes(1, rng);
    for (const auto& b : random_boxes(10, rng)) dets[c].push_back({b, u(rng)});
    dets[c].push_back({gts[c][0], u(rng)});
  }
  for (auto _ : state) benchmark::DoNotOptimize(metrics::map_sweep(dets, gts));
}
BENCHMARK(BM_AveragePrecisionSweep)->Arg(60)->Arg(300);

static void BM_MgdaMinNorm(benchmark::State& state) {
  torch::manual_seed(5);
  std::vector<torch::Tensor> g;
  for (int i = 0; i < 3; ++i) g.push_back(torch::randn({state.range(0)}, torch::kDouble));
  for (auto _ : state) benchmark::DoNotOptimize(mtl::mgda_minnorm(g));
}
BENCHMARK(BM_MgdaMinNorm)->Arg(1 << 10)->Arg(1 << 20);

static void BM_EncoderForward(benchmark::State& state) {
  torch::NoGradGuard ng;
  encoder::EncoderConfig cfg;
  cfg.embed_dim = 12;
  cfg.window_size = 4;
  encoder::SwinEncoder enc(cfg);
  enc->eval();
  const int64_t s = state.range(0);
  auto x = torch::randn({1, 4, s, s, s});
  for (auto _ : state) benchmark::DoNotOptimize(enc(x).stages.back());
}
BENCHMARK(BM_EncoderForward)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();

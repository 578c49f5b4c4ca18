// Microbenchmarks for the hot inference ops: convolution, feature
// extraction, cosine correlation, and the dense warp scorer.

#include <benchmark/benchmark.h>

#include "ots/alignment.hpp"
#include "ots/backbone.hpp"
#include "ots/correlation.hpp"
#include "ots/tensor.hpp"

namespace {

using namespace ots;

void BM_Conv2d3x3(benchmark::State& state) {
  NoGradGuard ng;
  Rng rng(1);
  int c = (int)state.range(0), hw = (int)state.range(1);
  Tensor<float> x = randn<float>({1, c, hw, hw}, rng, 1.0f);
  Tensor<float> w = randn<float>({c, c, 3, 3}, rng, 0.1f);
  Tensor<float> b = randn<float>({c}, rng, 0.1f);
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, b, 1, 1));
  state.SetItemsProcessed(state.iterations() * (int64_t)c * c * hw * hw * 9);
}
BENCHMARK(BM_Conv2d3x3)->Args({16, 128})->Args({32, 64})->Args({64, 32});

void BM_FeatureExtraction(benchmark::State& state) {
  NoGradGuard ng;
  Rng rng(2);
  int side = (int)state.range(0);
  BackboneConfig cfg;
  Backbone<float> bb(cfg, rng);
  Tensor<float> img = randn<float>({1, 3, side, side}, rng, 1.0f);
  for (auto _ : state) benchmark::DoNotOptimize(bb.extract_features(img, false));
}
BENCHMARK(BM_FeatureExtraction)->Arg(256)->Arg(512);

void BM_CorrelationMap(benchmark::State& state) {
  NoGradGuard ng;
  Rng rng(3);
  int q = (int)state.range(0);
  Tensor<float> fq = randn<float>({64, q, q}, rng, 1.0f);
  Tensor<float> fs = randn<float>({64, 8, 8}, rng, 1.0f);
  for (auto _ : state) benchmark::DoNotOptimize(correlation_map(fq, fs));
  state.SetItemsProcessed(state.iterations() * (int64_t)q * q * 64 * 64);
}
BENCHMARK(BM_CorrelationMap)->Arg(32)->Arg(64)->Arg(96);

void BM_DswScoreMap(benchmark::State& state) {
  NoGradGuard ng;
  Rng rng(4);
  int q = (int)state.range(0);
  Tensor<float> fq = randn<float>({64, q, q}, rng, 1.0f);
  Tensor<float> fs = randn<float>({64, 8, 8}, rng, 1.0f);
  for (auto _ : state) benchmark::DoNotOptimize(dsw_score_map(fq, fs));
}
BENCHMARK(BM_DswScoreMap)->Arg(32)->Arg(64);

void BM_DenseWarpScores(benchmark::State& state) {
  NoGradGuard ng;
  Rng rng(5);
  int q = (int)state.range(0), hs = 8, ws = 8;
  Tensor<float> fq = randn<float>({64, q, q}, rng, 1.0f);
  Tensor<float> fs = randn<float>({64, hs, ws}, rng, 1.0f);
  auto cm = correlation_map(fq, fs);
  int ha = q - 4, wa = q - 4;  // anchor lattice after the regression window
  Tensor<float> theta = Tensor<float>::zeros({1, 6, ha, wa});
  auto& tv = theta.values();
  int64_t na = (int64_t)ha * wa;
  for (int64_t i = 0; i < na; ++i) {
    tv[0 * na + i] = 1.0f;  // identity warp per anchor
    tv[4 * na + i] = 1.0f;
  }
  std::vector<uint8_t> oob;
  for (auto _ : state)
    benchmark::DoNotOptimize(dense_warp_scores(theta, cm.reshaped, hs, ws, 2, 2, &oob));
}
BENCHMARK(BM_DenseWarpScores)->Arg(32)->Arg(64);

}  // namespace

BENCHMARK_MAIN();

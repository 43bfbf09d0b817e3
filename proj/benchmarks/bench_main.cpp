// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include "sardiff/conditioning.hpp"
#include "sardiff/denoiser.hpp"
#include "sardiff/ops.hpp"
#include "sardiff/pipeline.hpp"
#include "sardiff/vae.hpp"

using namespace sardiff;

namespace {

void BM_Conv2d(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto n = static_cast<std::size_t>(state.range(1));
  Rng rng(1);
  const Tensor x = rng.normal_tensor({1, c, n, n});
  const Tensor w = rng.normal_tensor({c, c, 3, 3});
  const Tensor b = rng.normal_tensor({c});
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d(x, w, &b, 1, 1));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * c * c * 9 * n * n));
}
BENCHMARK(BM_Conv2d)->Args({16, 32})->Args({32, 16})->Args({32, 64});

void BM_DenoiserForward(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  const DenoiserParams m = init_denoiser(DenoiserConfig{}, rng);
  const Tensor z = rng.normal_tensor({batch, 4, 8, 8});
  const std::vector<int> ts(batch, 500);
  const std::vector<TokenSequence> text(batch, tokenize(std::string_view("sd40 sar field road")));
  for (auto _ : state) benchmark::DoNotOptimize(predict_noise(m, z, ts, text));
}
BENCHMARK(BM_DenoiserForward)->Arg(1)->Arg(16);

void BM_VaeLossWithGrads(benchmark::State& state) {
  Rng rng(3);
  const VaeParams v = init_vae(VaeConfig{}, rng);
  Tensor x({static_cast<std::size_t>(state.range(0)), 1, 64, 64});
  for (double& p : x.storage()) p = rng.uniform();
  for (auto _ : state) benchmark::DoNotOptimize(vae_loss(v, x, rng, 1e-4));
}
BENCHMARK(BM_VaeLossWithGrads)->Arg(4)->Unit(benchmark::kMillisecond);

void BM_Canny(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(4);
  Tensor img({1, 1, n, n});
  for (double& p : img.storage()) p = rng.uniform();
  for (auto _ : state) benchmark::DoNotOptimize(canny(img));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n));
}
BENCHMARK(BM_Canny)->Arg(64)->Arg(256);

void BM_TileCondition(benchmark::State& state) {
  Rng rng(5);
  Tensor img({1, 1, 256, 256});
  for (double& p : img.storage()) p = rng.uniform();
  for (auto _ : state) benchmark::DoNotOptimize(tile_condition(img, 4));
}
BENCHMARK(BM_TileCondition);

}  // namespace

BENCHMARK_MAIN();

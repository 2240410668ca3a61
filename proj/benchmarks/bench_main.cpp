// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include <numeric>
#include <random>

#include "cbn/clevr/dataset.hpp"
#include "cbn/clevr/generator.hpp"
#include "cbn/clevr/language.hpp"
#include "cbn/clevr/render.hpp"
#include "cbn/model.hpp"
#include "cbn/ops.hpp"
#include "cbn/trainer.hpp"

namespace {

using namespace cbn;

Tensor<float> uniform(const Shape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor<float>(shape, std::move(v));
}

void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = uniform({n, n}, 1), b = uniform({n, n}, 2);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b).data().data());
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Gemm)->Arg(64)->Arg(256)->Arg(512);

void BM_Conv3x3(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto x = uniform({64, c, 12, 12}, 3), k = uniform({c, c, 3, 3}, 4);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, k, 1, 1).data().data());
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_Conv3x3)->Arg(32)->Arg(128);

struct DeskBatch {
  Model<float> model;
  Batch batch;
};

DeskBatch desk_batch() {
  clevr::DatasetConfig dc;
  dc.n_train = 64;
  dc.n_val = 1;
  dc.n_test = 1;
  const auto split = clevr::generate_split(dc, clevr::SplitName::train);
  std::vector<std::size_t> idx(64);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const auto cfg = ModelConfig::desk(clevr::vocabulary().size(), clevr::answer_list().size());
  return {init_model<float>(cfg, 1), make_batch(split, idx)};
}

void BM_ForwardEval(benchmark::State& state) {
  auto d = desk_batch();
  for (auto _ : state) benchmark::DoNotOptimize(predict_batch(d.model, d.batch.images, d.batch.tokens));
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_ForwardEval)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  auto d = desk_batch();
  TrainingState<float> st;
  const TrainConfig tc;
  for (auto _ : state) benchmark::DoNotOptimize(train_step(d.model, d.batch, st, tc));
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

void BM_GenerateSample(benchmark::State& state) {
  std::uint64_t i = 0;
  for (auto _ : state) benchmark::DoNotOptimize(clevr::generate_sample(1, i++, 48).answer);
}
BENCHMARK(BM_GenerateSample);

void BM_Render(benchmark::State& state) {
  const auto scene = clevr::sample_scene(3, 48);
  std::vector<float> out(3 * 48 * 48);
  for (auto _ : state) {
    clevr::render_into(scene, 48, out);
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_Render);

}  // namespace

BENCHMARK_MAIN();

#include <benchmark/benchmark.h>

#include "ctxprune/dataset.hpp"
#include "ctxprune/flops.hpp"
#include "ctxprune/gates.hpp"
#include "ctxprune/model.hpp"
#include "ctxprune/ops.hpp"
#include "ctxprune/stats.hpp"
#include "ctxprune/training.hpp"

using namespace ctxprune;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, RngState& rng, bool grad = false) {
  std::vector<double> v(r * c);
  for (auto& x : v) x = rng.normal();
  return Tensor({r, c}, std::move(v), grad);
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  RngState rng(1);
  const Tensor a = random_matrix(n, n, rng), b = random_matrix(n, n, rng);
  NoGradGuard g;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(64)->Arg(128);

void BM_MatmulBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  RngState rng(2);
  Tensor a = random_matrix(n, n, rng, true), b = random_matrix(n, n, rng, true);
  for (auto _ : state) {
    a.zero_grad();
    b.zero_grad();
    backward(sum(matmul(a, b)));
  }
}
BENCHMARK(BM_MatmulBackward)->Arg(64);

// Encoder pass over one utterance: dense, then temporal and utterance
// execution with ~70% of the gates kept.
void BM_Encoder(benchmark::State& state) {
  const auto mode = static_cast<ExecMode>(state.range(0));
  ModelConfig cfg;
  ParamStore store;
  ToyModel model(cfg, store, RngState(3));
  RngState rng(4);
  const std::size_t frames = 48;
  const Tensor features = random_matrix(frames, cfg.feature_dim, rng);
  const Granularity g = mode == ExecMode::Utterance ? Granularity::Utterance : Granularity::Position;
  GateSet gates = GateSet::uniform(cfg, frames, 4, g, true);
  for (const auto& spec : prunable_modules(cfg, Stage::Encoder)) {
    GateEntry e = gates.at(spec.kind, spec.layer_index);
    for (auto& d : e.decision) d = rng.uniform() < 0.7 ? 1 : 0;
    gates.put(e);
  }
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(encoder_forward(model, features, gates, mode));
}
BENCHMARK(BM_Encoder)
    ->Arg(static_cast<int>(ExecMode::Dense))
    ->Arg(static_cast<int>(ExecMode::Temporal))
    ->Arg(static_cast<int>(ExecMode::Utterance));

void BM_TrainStep(benchmark::State& state) {
  RunConfig cfg;
  cfg.train.pretrain_steps = 0;
  Trainer trainer(cfg);
  const auto batch = generate_dataset(cfg.task, cfg.train.batch_size, 5);
  for (auto _ : state) benchmark::DoNotOptimize(trainer.step(batch));
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

void BM_CountFlops(benchmark::State& state) {
  ModelConfig cfg;
  const GateSet gates = GateSet::uniform(cfg, 48, 6, Granularity::Position, true);
  for (auto _ : state) benchmark::DoNotOptimize(count_flops_model(gates, cfg, ExecMode::Temporal));
}
BENCHMARK(BM_CountFlops);

void BM_MannWhitneyExact(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  RngState rng(6);
  std::vector<double> a(n), b(n);
  for (auto& x : a) x = static_cast<double>(rng.below(5));
  for (auto& x : b) x = static_cast<double>(rng.below(5));
  for (auto _ : state) benchmark::DoNotOptimize(mann_whitney_u(a, b, MannWhitneyMethod::Exact));
}
BENCHMARK(BM_MannWhitneyExact)->Arg(20)->Arg(100);

}  // namespace

BENCHMARK_MAIN();

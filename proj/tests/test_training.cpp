#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ctxprune/checkpoint.hpp"
#include "ctxprune/errors.hpp"
#include "ctxprune/training.hpp"

using namespace ctxprune;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_config() {
  RunConfig c;
  c.train.pretrain_steps = 4;
  c.train.steps = 6;
  c.train.warmup_steps = 3;
  c.train_size = 12;
  c.eval_size = 3;
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "ctxprune_unit" / name;
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("schedules") {
  TrainConfig t;
  t.lr = 1.0;
  t.warmup_steps = 4;
  t.steps = 100;
  CHECK(t.lr_at(0) == 0.25);
  CHECK(t.lr_at(3) == 1.0);
  CHECK(t.lr_at(50) == 1.0);
  CHECK(t.lambda_at(0) == 0.0);
  CHECK(t.lambda_at(2) == 0.5);
  CHECK(t.lambda_at(9) == 1.0);
  CHECK(t.temperature_at(0) == 1.0);
  CHECK(t.temperature_at(25) == doctest::Approx(0.75));
  CHECK(t.temperature_at(50) == doctest::Approx(0.5));
  CHECK(t.temperature_at(99) == doctest::Approx(0.5));
}

TEST_CASE("sparsity loss is the squared gap of the pooled mean") {
  ModelConfig m;
  m.n_enc_layers = 1;
  m.n_dec_layers = 1;
  GateSet a = GateSet::uniform(m, 2, 1, Granularity::Position, true);
  GateEntry e = a.at(ModuleKind::EncFFN, 0);
  e.probability = {0.0, 0.0};
  a.put(e);
  // Encoder probabilities: four ones and two zeros -> mean 2/3.
  const std::vector<GateSet> sets{a};
  const double want = (2.0 / 3.0 - 0.7) * (2.0 / 3.0 - 0.7);
  CHECK(sparsity_loss(sets, 0.7, true, false).item() == doctest::Approx(want).epsilon(1e-14));
  CHECK(sparsity_loss(sets, 0.7, true, true).item() == doctest::Approx(want + 0.09).epsilon(1e-14));
}

TEST_CASE("config validation and json round trip") {
  RunConfig c = tiny_config();
  c.context = "front+spk";
  c.gate_decoder = true;
  c.task.phones = 5;
  const RunConfig back = RunConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.train.pretrain_steps == 4);
  CHECK(back.task.phones == 5);
  RunConfig bad = c;
  bad.context = "front+nothing";
  CHECK_THROWS(bad.validate());
  bad = c;
  bad.mode = ExecMode::Dense;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("the dense phase precedes gating") {
  Trainer trainer(tiny_config());
  const auto data = generate_dataset(trainer.config().task, 4, 1);
  CHECK(trainer.pretraining());
  std::vector<StepMetrics> m;
  for (int i = 0; i < 6; ++i) m.push_back(trainer.step(data));
  for (int i = 0; i < 4; ++i) {
    CHECK(m[i].dense_phase);
    CHECK(m[i].lambda == 0.0);
    CHECK(m[i].sparsity_loss == 0.0);
  }
  CHECK_FALSE(m[4].dense_phase);
  CHECK_FALSE(trainer.pretraining());
  // Gate schedules restart at the first gated step.
  CHECK(m[4].lr == doctest::Approx(trainer.config().train.lr_at(0)));
  CHECK(m[5].lambda == doctest::Approx(trainer.config().train.lambda_at(1)));
  for (const auto& s : m) CHECK(std::isfinite(s.task_loss));
}

TEST_CASE("training lowers the task loss") {
  RunConfig c = tiny_config();
  c.train.pretrain_steps = 60;
  c.train.steps = 1;
  Trainer trainer(c);
  const auto data = generate_dataset(c.task, 8, 2);
  const double first = trainer.step(data).task_loss;
  double last = first;
  for (int i = 0; i < 59; ++i) last = trainer.step(data).task_loss;
  CHECK(last < 0.8 * first);
}

TEST_CASE("metrics csv format") {
  CHECK(metrics_csv_header() ==
        "step,phase,lr,temperature,lambda,task_loss,sparsity_loss,mean_keep,keep_rate,grad_norm");
  StepMetrics m;
  m.step = 3;
  m.dense_phase = true;
  CHECK(metrics_csv_row(m).rfind("3,dense,", 0) == 0);
}

TEST_CASE("full run writes its artifacts and the checkpoint reproduces the evaluation") {
  const fs::path dir = scratch("run");
  RunConfig c = tiny_config();
  c.gate_decoder = true;
  const auto out = run_training(c, dir);
  CHECK(out.metrics.size() == 10);
  for (const char* f : {"config.json", "metrics.csv", "checkpoints/final.ckpt", "eval/gates.csv", "eval/labels.csv",
                        "eval/tokens.csv", "eval/flops.json", "eval/eval.json"})
    CHECK(fs::exists(dir / f));
  CHECK(out.eval.gates.size() == c.eval_size);
  CHECK(out.eval.keep_encoder <= 1.0);
  CHECK(out.eval.flops.utterances == c.eval_size);

  const RunConfig saved = RunConfig::from_json(slurp(dir / "config.json"));
  // A fresh trainer starts in its dense phase; switch pretraining off so it gates.
  const auto eval_data = generate_dataset(saved.task, saved.eval_size, saved.eval_seed);
  RunConfig no_pretrain = saved;
  no_pretrain.train.pretrain_steps = 0;
  Trainer gated(no_pretrain);
  load_checkpoint(dir / "checkpoints" / "final.ckpt", gated.params());
  const auto again = gated.evaluate(eval_data);
  CHECK(again.token_accuracy == out.eval.token_accuracy);
  CHECK(again.keep_encoder == out.eval.keep_encoder);
  CHECK(again.flops.pruned_total() == out.eval.flops.pruned_total());
}

TEST_CASE("dense runs keep everything") {
  RunConfig c = tiny_config();
  c.gating = GatingKind::Dense;
  c.mode = ExecMode::Dense;
  const auto out = run_training(c);
  CHECK(out.eval.keep_encoder == 1.0);
  CHECK(out.eval.flops.reduction() == 0);
}

TEST_CASE("global gating trains and evaluates") {
  RunConfig c = tiny_config();
  c.gating = GatingKind::Global;
  c.mode = ExecMode::Utterance;
  const auto out = run_training(c);
  CHECK(out.eval.tokens > 0);
  for (const auto& g : out.eval.gates)
    for (const auto& e : g.entries()) CHECK(e.decision.size() == 1);
}

TEST_CASE("greedy decoding stops at eos") {
  Trainer trainer(tiny_config());
  const auto u = generate_dataset(trainer.config().task, 1, 9)[0];
  const auto out = trainer.greedy_decode(u, 5);
  CHECK(out.size() <= 5);
}

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ctxprune/context.hpp"
#include "ctxprune/dataset.hpp"
#include "ctxprune/flops.hpp"
#include "ctxprune/gates.hpp"
#include "ctxprune/model.hpp"

namespace ctxprune {

struct TrainConfig {
  std::size_t batch_size = 4;
  /// Peak learning rate (a fine-tuning rate of 1e-5 scaled by 100 for the toy model).
  double lr = 1e-3;
  std::size_t warmup_steps = 100;
  /// Gated steps. Gate schedules (warmup, lambda ramp, annealing) count from
  /// the first gated step.
  std::size_t steps = 3000;
  /// Dense steps run before gating starts (gate predictors idle).
  std::size_t pretrain_steps = 1000;
  /// Sparsity weight; ramped linearly from 0 over the warmup.
  double sparsity_weight = 1.0;
  double target_keep_ratio = 0.7;
  double temperature_start = 1.0;
  double temperature_end = 0.5;
  /// Steps over which the temperature anneals; 0 means half of `steps`.
  std::size_t anneal_steps = 0;
  /// Global gradient-norm clip; 0 disables.
  double grad_clip = 5.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;

  void validate() const;
  /// Linear warmup to `lr`, then constant.
  double lr_at(std::size_t step) const;
  double lambda_at(std::size_t step) const;
  /// Linear from start to end over the anneal window, then flat.
  double temperature_at(std::size_t step) const;
};

enum class GatingKind { Dense, Local, Global };
std::string_view to_string(GatingKind kind);
GatingKind gating_kind_from_string(std::string_view s);

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  TaskSpec task;
  ProviderConfig provider;
  std::string context = "front";
  GatingKind gating = GatingKind::Local;
  ExecMode mode = ExecMode::Temporal;
  bool gate_encoder = true;
  bool gate_decoder = false;
  std::size_t train_size = 400;
  std::size_t eval_size = 100;
  std::uint64_t data_seed = 11;
  std::uint64_t eval_seed = 12;
  /// Optional directory of external speaker/event embeddings.
  std::filesystem::path context_dir;

  void validate() const;
  std::string to_json() const;
  static RunConfig from_json(const std::string& text);
};

struct StepMetrics {
  std::size_t step = 0;
  bool dense_phase = false;
  double lr = 0.0;
  double temperature = 0.0;
  double lambda = 0.0;
  double task_loss = 0.0;
  double sparsity_loss = 0.0;
  /// Mean keep probability over gated stages.
  double mean_keep = 1.0;
  /// Fraction of hard training masks that kept.
  double keep_rate = 1.0;
  double grad_norm = 0.0;
};

struct ForwardResult {
  Tensor logits;  // [L x vocab]
  GateSet gates;
  LayerActivations encoder;
};

struct KeepRate {
  Stage stage = Stage::Encoder;
  std::size_t layer = 0;
  ModuleKind kind = ModuleKind::EncSelfAttn;
  std::size_t kept = 0;
  std::size_t total = 0;
  double rate() const { return total ? static_cast<double>(kept) / static_cast<double>(total) : 1.0; }
};

struct EvalResult {
  double token_accuracy = 0.0;
  std::size_t tokens = 0;
  /// Inference decision rate of each stage (1 when the stage is not gated).
  double keep_encoder = 1.0;
  double keep_decoder = 1.0;
  std::vector<KeepRate> keep_rates;
  FlopsReport flops;
  std::vector<GateSet> gates;  // one per utterance, in dataset order

  std::string to_json(const std::string& context) const;
};

/// (mean keep probability - target)^2 for each gated stage, summed. The mean
/// pools every gate position of every set in `gates`.
Tensor sparsity_loss(std::span<const GateSet> gates, double target, bool encoder = true, bool decoder = true);

class Trainer {
 public:
  explicit Trainer(RunConfig config);

  const RunConfig& config() const { return config_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const ToyModel& model() const { return *model_; }
  const LocalGatePredictor* local_predictor(Stage stage) const;
  std::size_t steps_done() const { return step_; }
  /// True until `pretrain_steps` dense steps have run.
  bool pretraining() const { return step_ < config_.train.pretrain_steps; }

  /// One optimizer step on `batch`. Throws NumericError on a non-finite loss.
  StepMetrics step(std::span<const SyntheticUtterance> batch);

  /// Teacher-forced forward pass. Training mode samples hard gates with
  /// Gumbel noise from `rng`; inference thresholds. Dense while pretraining.
  ForwardResult forward(const SyntheticUtterance& utt, bool training, RngState rng, double temperature = 1.0) const;

  EvalResult evaluate(std::span<const SyntheticUtterance> data) const;

  /// Greedy decoding under inference gating, stopping at <eos>.
  std::vector<int> greedy_decode(const SyntheticUtterance& utt, std::size_t max_tokens = 16) const;

  FlopsOptions flops_options(std::size_t frames) const;

 private:
  RunConfig config_;
  ContextConfig context_;
  ContextConfig decoder_context_;
  std::shared_ptr<const ContextProvider> provider_;
  ParamStore store_;
  std::unique_ptr<ToyModel> model_;
  std::unique_ptr<LocalGatePredictor> enc_gate_, dec_gate_;
  std::unique_ptr<GlobalGatePredictor> global_gate_;
  std::vector<std::vector<double>> adam_m_, adam_v_;
  std::size_t step_ = 0;
};

/// Raw (rows, width) of each LocalGP stream for an utterance of `frames`
/// frames, matching the synthetic providers (front rows are pooled to one
/// row for the decoder).
std::vector<std::pair<std::size_t, std::size_t>> context_stream_shapes(const ContextConfig& context,
                                                                       const ProviderConfig& provider,
                                                                       std::size_t d_model, std::size_t frames,
                                                                       Stage stage);

/// LocalGP/GlobalGP overhead settings of a run for an utterance of `frames` frames.
FlopsOptions run_flops_options(const RunConfig& config, std::size_t frames);

struct RunOutput {
  std::vector<StepMetrics> metrics;
  EvalResult eval;
};

/// Full run: generate the splits, train, evaluate. With a non-empty
/// `out_dir`, writes config.json, metrics.csv, checkpoints/final.ckpt and
/// eval/{gates.csv, labels.csv, tokens.csv, flops.json, eval.json}.
RunOutput run_training(const RunConfig& config, const std::filesystem::path& out_dir = {},
                       const std::function<void(const StepMetrics&)>& on_step = {});

/// metrics.csv header and row formatting (17 significant digits).
std::string metrics_csv_header();
std::string metrics_csv_row(const StepMetrics& m);

}  // namespace ctxprune

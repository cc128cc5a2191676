// ctxprune: train gated toy models and analyze their gate dumps.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "ctxprune/analysis.hpp"
#include "ctxprune/dumps.hpp"
#include "ctxprune/errors.hpp"
#include "ctxprune/flops.hpp"
#include "ctxprune/training.hpp"

using namespace ctxprune;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void emit(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path);
  out << text;
}

struct TrainArgs {
  std::string config, context, gating, mode, stages, out = "run", context_dir;
  std::uint64_t seed = 0;
  bool has_seed = false;
  std::size_t steps = 0;
  std::size_t log_every = 100;
};

int run_train(const TrainArgs& a) {
  RunConfig cfg;
  if (!a.config.empty()) cfg = RunConfig::from_json(slurp(a.config));
  if (a.has_seed) cfg.train.seed = a.seed;
  if (!a.context.empty()) cfg.context = a.context;
  if (!a.gating.empty()) cfg.gating = gating_kind_from_string(a.gating);
  if (!a.mode.empty()) cfg.mode = exec_mode_from_string(a.mode);
  if (cfg.gating == GatingKind::Dense) cfg.mode = ExecMode::Dense;
  if (!a.stages.empty()) {
    cfg.gate_encoder = a.stages.find("enc") != std::string::npos;
    cfg.gate_decoder = a.stages.find("dec") != std::string::npos;
  }
  if (a.steps) cfg.train.steps = a.steps;
  if (!a.context_dir.empty()) cfg.context_dir = a.context_dir;
  cfg.validate();

  const auto t0 = std::chrono::steady_clock::now();
  const auto out = run_training(cfg, a.out, [&](const StepMetrics& m) {
    if (a.log_every && (m.step % a.log_every == 0 || m.step == cfg.train.steps)) {
      std::fprintf(stderr, "step %5zu  loss %.4f  sparsity %.5f  keep_prob %.3f  keep %.3f  tau %.3f\n", m.step,
                   m.task_loss, m.sparsity_loss, m.mean_keep, m.keep_rate, m.temperature);
    }
  });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("token_accuracy %.4f  keep_encoder %.4f  keep_decoder %.4f  gflops_reduction %.2f%%  (%.1fs)\n",
              out.eval.token_accuracy, out.eval.keep_encoder, out.eval.keep_decoder,
              out.eval.flops.dense_total() ? 100.0 * static_cast<double>(out.eval.flops.reduction()) /
                                                 static_cast<double>(out.eval.flops.dense_total())
                                           : 0.0,
              secs);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Context-driven dynamic pruning toolkit"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model and dump its evaluation gates");
  train->add_option("--config", ta.config, "Run config JSON (defaults when omitted)");
  train->add_option("--seed", ta.seed, "Training seed")->each([&](const std::string&) { ta.has_seed = true; });
  train->add_option("--context", ta.context, "Context streams, e.g. front+spk");
  train->add_option("--gating", ta.gating, "Gate predictor")->check(CLI::IsMember({"global", "local", "dense"}));
  train->add_option("--mode", ta.mode, "Execution granularity")->check(CLI::IsMember({"temporal", "utterance"}));
  train->add_option("--stages", ta.stages, "Gated stages: enc, dec or enc+dec");
  train->add_option("--steps", ta.steps, "Override the step count");
  train->add_option("--out", ta.out, "Run directory")->capture_default_str();
  train->add_option("--context-dir", ta.context_dir, "Directory of external context embeddings");
  train->add_option("--log-every", ta.log_every, "Progress interval on stderr (0 = quiet)")->capture_default_str();

  auto* analyze = app.add_subcommand("analyze", "Analyses over gate dumps");
  analyze->require_subcommand(1);

  std::string input, output, labels, tokens, module = "enc_self_attn";
  std::size_t utterance = 0;

  auto* vad = analyze->add_subcommand("vad", "Speech vs silence keep rates per layer (JSON)");
  vad->add_option("--input", input, "gates.csv")->required();
  vad->add_option("--labels", labels, "labels.csv")->required();
  vad->add_option("--output", output, "Output JSON ('-' for stdout)");

  auto* tok = analyze->add_subcommand("tokens", "Source-attention keep rates by token class (JSON)");
  tok->add_option("--input", input, "gates.csv")->required();
  tok->add_option("--tokens", tokens, "tokens.csv")->required();
  tok->add_option("--output", output, "Output JSON ('-' for stdout)");

  auto* heat = analyze->add_subcommand("heatmap", "Energy and gate-mask plot of one utterance (SVG)");
  heat->add_option("--input", input, "gates.csv")->required();
  heat->add_option("--labels", labels, "labels.csv")->required();
  heat->add_option("--utterance", utterance, "Utterance index")->capture_default_str();
  heat->add_option("--module", module, "Module kind")->capture_default_str();
  heat->add_option("--output", output, "Output SVG ('-' for stdout)");

  std::string config_path;
  auto* flops = app.add_subcommand("flops", "Recount FLOPs from a gate dump (JSON)");
  flops->add_option("--input", input, "gates.csv")->required();
  flops->add_option("--config", config_path, "Run config.json of the dump")->required();
  flops->add_option("--output", output, "Output JSON ('-' for stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return run_train(ta);
    if (vad->parsed()) {
      const auto dump = read_gate_dump(std::filesystem::path(input));
      const auto scores = vad_likeness(dump, read_label_dump(std::filesystem::path(labels)));
      emit(output, vad_json(scores, layer_keep_rates(dump, Stage::Encoder)) + "\n");
    } else if (tok->parsed()) {
      const auto dump = read_gate_dump(std::filesystem::path(input));
      const auto records = token_records(dump, read_token_dump(std::filesystem::path(tokens)));
      emit(output, src_attention_token_stats(records).to_json() + "\n");
    } else if (heat->parsed()) {
      const auto dump = read_gate_dump(std::filesystem::path(input));
      emit(output, render_heatmap(dump, read_label_dump(std::filesystem::path(labels)), utterance,
                                  module_kind_from_string(module)));
    } else if (flops->parsed()) {
      const RunConfig cfg = RunConfig::from_json(slurp(config_path));
      const auto dump = read_gate_dump(std::filesystem::path(input));
      const bool utt_level = dump.mode == "utterance";
      const ExecMode mode = dump.mode == "dense" ? ExecMode::Dense : (utt_level ? ExecMode::Utterance : ExecMode::Temporal);
      FlopsReport total;
      bool first = true;
      for (const auto& [id, gates] : to_gate_sets(dump, utt_level)) {
        const auto r = count_flops_model(gates, cfg.model, mode, run_flops_options(cfg, gates.length(Stage::Encoder)));
        if (first) {
          total = r;
          first = false;
        } else {
          total += r;
        }
      }
      if (first) throw FormatError("gate dump has no rows");
      emit(output, total.to_json() + "\n");
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ctxprune/gates.hpp"
#include "ctxprune/model_types.hpp"

namespace ctxprune {

// Counting convention: multiply-accumulates of the matrix products only.
// Softmax, normalization and activation costs are not counted.
//
//   self-attention  4 T d^2 + 2 T^2 d        (Q, K, V, O projections; scores and context)
//   FFN             2 T d d_ffn
//   cgMLP           T (2 d d_ffn + k d_ffn + d_ffn d)   with T the full length
//   source attn     2 L d^2 + 2 S d^2 + 2 L S d         (Q, O; K, V over S memory rows; scores and context)
//                   the K/V term is dropped when no token runs the module
//
// GFLOPs = 2 * MACs / 1e9.

/// MACs of one module that processes `t_effective` rows. Source attention also
/// needs the memory length. cgMLP counts `t_effective` as given; callers pass
/// the full length whenever it runs.
std::uint64_t count_flops_module(const PrunableModuleSpec& spec, std::size_t t_effective, const ModelConfig& config,
                                 std::size_t memory_rows = 0);

enum class PredictorKind { None, Local, Global };

struct FlopsOptions {
  PredictorKind predictor = PredictorKind::None;
  bool gate_encoder = true;
  bool gate_decoder = false;
  /// Raw (rows, width) of each context stream the LocalGP projects, per stage
  /// (front included, as the model produces it).
  std::vector<std::pair<std::size_t, std::size_t>> encoder_streams;
  std::vector<std::pair<std::size_t, std::size_t>> decoder_streams;
};

struct ModuleFlops {
  Stage stage = Stage::Encoder;
  std::size_t layer = 0;
  ModuleKind kind = ModuleKind::EncSelfAttn;
  std::uint64_t dense = 0;
  std::uint64_t pruned = 0;
};

struct StageFlops {
  std::uint64_t dense = 0;   // prunable modules + fixed
  std::uint64_t pruned = 0;  // prunable modules as executed + fixed
  std::uint64_t fixed = 0;   // never gated (encoder merge, decoder output projection)
  std::uint64_t gate_overhead = 0;
  std::uint64_t context_overhead = 0;

  /// dense - (pruned + overheads); negative when gating costs more than it saves.
  std::int64_t reduction() const;
  StageFlops& operator+=(const StageFlops& other);
};

struct FlopsReport {
  static constexpr int kSchemaVersion = 1;

  ExecMode mode = ExecMode::Dense;
  std::size_t utterances = 0;
  std::vector<ModuleFlops> modules;
  StageFlops encoder;
  StageFlops decoder;
  std::uint64_t frontend = 0;

  std::uint64_t dense_total() const { return encoder.dense + decoder.dense; }
  std::uint64_t pruned_total() const { return encoder.pruned + decoder.pruned; }
  std::uint64_t gate_overhead() const { return encoder.gate_overhead + decoder.gate_overhead; }
  std::uint64_t context_overhead() const { return encoder.context_overhead + decoder.context_overhead; }
  std::int64_t reduction() const { return encoder.reduction() + decoder.reduction(); }

  /// Adds another utterance's counts; module rows are matched by (stage, layer, kind).
  FlopsReport& operator+=(const FlopsReport& other);

  std::string to_json() const;
  static FlopsReport from_json(const std::string& text);
};

double gflops(std::uint64_t macs);

/// Counts one utterance. Lengths come from gates.length(); a stage of length 0
/// is skipped. In Dense mode the decisions are ignored.
FlopsReport count_flops_model(const GateSet& gates, const ModelConfig& config, ExecMode mode,
                              const FlopsOptions& options = {});

}  // namespace ctxprune

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ctxprune/dumps.hpp"
#include "ctxprune/stats.hpp"

namespace ctxprune {

/// Keep-rate on speech frames minus keep-rate on silence frames.
struct VadScore {
  std::size_t layer = 0;
  /// Empty: all modules of the layer pooled.
  std::optional<ModuleKind> kind;
  double speech_rate = 0.0;
  double silence_rate = 0.0;
  std::size_t n_speech = 0;
  std::size_t n_silence = 0;

  double score() const { return speech_rate - silence_rate; }
};

/// Per encoder layer (pooled over modules) followed by one row per
/// (layer, module). Every gate row needs a label row with the same
/// (utterance, position), otherwise ContractError.
std::vector<VadScore> vad_likeness(const GateDump& gates, const std::vector<LabelRow>& labels);

/// Mean pooled score over layers with index >= first_layer.
double mean_vad(const std::vector<VadScore>& scores, std::size_t first_layer);

/// Mean decision per layer of one stage, pooled over modules and positions.
std::vector<double> layer_keep_rates(const GateDump& gates, Stage stage);

struct TokenGateRecord {
  std::size_t utterance = 0;
  std::size_t position = 0;
  int token_id = 0;
  std::string surface;
  bool starts_word = false;
  /// Source-attention decision per decoder layer.
  std::vector<std::uint8_t> src_decisions;

  double src_keep_rate() const;
};

/// Joins decoder gate rows with the token dump. Special tokens (<eos>, tags)
/// are skipped; a token without gates is a ContractError.
std::vector<TokenGateRecord> token_records(const GateDump& gates, const std::vector<TokenRow>& tokens);

struct GroupComparison {
  std::string scope;  // "pooled" or "layer<i>"
  double mean_with_space = 0.0;
  double mean_without_space = 0.0;
  std::size_t n_with_space = 0;
  std::size_t n_without_space = 0;
  StatTestResult mann_whitney;
  StatTestResult welch;
};

struct TokenStatsReport {
  GroupComparison pooled;
  std::vector<GroupComparison> per_layer;

  std::string to_json() const;
};

/// Source-attention usage (keep-rate) of word-initial vs other tokens, pooled
/// over layers and per layer, with both tests. Tests that cannot run (empty
/// group, too few samples, zero variance everywhere) are marked not applicable.
TokenStatsReport src_attention_token_stats(const std::vector<TokenGateRecord>& records);

/// Two-panel SVG for one utterance: per-frame energy bars on top, the
/// layers x frames keep mask of `kind` below.
std::string render_heatmap(const GateDump& gates, const std::vector<LabelRow>& labels, std::size_t utterance,
                           ModuleKind kind);

std::string vad_json(const std::vector<VadScore>& scores, const std::vector<double>& layer_rates);

}  // namespace ctxprune

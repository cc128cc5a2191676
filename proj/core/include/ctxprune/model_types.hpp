#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace ctxprune {

enum class Stage { Encoder, Decoder };

/// Every individually prunable module kind. Encoder layers hold the first
/// three, decoder layers the last three, in this order.
enum class ModuleKind { EncSelfAttn, EncCgMLP, EncFFN, DecSelfAttn, DecSrcAttn, DecFFN };

inline constexpr std::array<ModuleKind, 3> kEncoderKinds{ModuleKind::EncSelfAttn, ModuleKind::EncCgMLP,
                                                         ModuleKind::EncFFN};
inline constexpr std::array<ModuleKind, 3> kDecoderKinds{ModuleKind::DecSelfAttn, ModuleKind::DecSrcAttn,
                                                         ModuleKind::DecFFN};
inline constexpr std::size_t kModulesPerLayer = 3;

std::string_view to_string(Stage stage);
std::string_view to_string(ModuleKind kind);
Stage stage_from_string(std::string_view s);
ModuleKind module_kind_from_string(std::string_view s);
Stage stage_of(ModuleKind kind);
/// Position n of the kind inside its layer (0, 1 or 2).
std::size_t module_slot(ModuleKind kind);
const std::array<ModuleKind, 3>& stage_kinds(Stage stage);

enum class ExecMode { Dense, Temporal, Utterance };
std::string_view to_string(ExecMode mode);
ExecMode exec_mode_from_string(std::string_view s);

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_enc_layers = 4;
  std::size_t n_dec_layers = 2;
  std::size_t d_ffn = 128;
  std::size_t cgmlp_kernel = 3;
  std::size_t vocab_size = 32;
  std::size_t max_frames = 64;
  std::size_t feature_dim = 16;
  double target_keep_ratio = 0.7;
  double gate_temperature = 1.0;
  double gate_threshold = 0.5;
  /// Width D of the gate predictors' context memory; must equal d_model.
  std::size_t context_dim = 64;
  /// Divide gate-predictor attention scores by sqrt(D). Off by default:
  /// plain unscaled dot products.
  bool scaled_gate_attention = false;
  std::size_t global_hidden = 64;
  std::size_t context_embed_dim = 8;
  std::size_t n_context_ids = 3;
  /// Initial keep-logit bias of every gate head (prune logit bias is 0).
  double gate_keep_bias = 2.2;

  std::size_t n_layers(Stage stage) const { return stage == Stage::Encoder ? n_enc_layers : n_dec_layers; }

  /// Throws ParameterError on the first violated invariant.
  void validate() const;

  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
};

struct PrunableModuleSpec {
  ModuleKind kind = ModuleKind::EncSelfAttn;
  std::size_t layer_index = 0;
  std::size_t module_index_in_layer = 0;

  Stage stage() const { return stage_of(kind); }
  friend bool operator==(const PrunableModuleSpec&, const PrunableModuleSpec&) = default;
};

/// All prunable modules of a stage, layer-major.
std::vector<PrunableModuleSpec> prunable_modules(const ModelConfig& config, Stage stage);

}  // namespace ctxprune

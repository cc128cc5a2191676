#pragma once

#include <array>
#include <span>
#include <vector>

#include "ctxprune/model_types.hpp"
#include "ctxprune/nn.hpp"
#include "ctxprune/pruning.hpp"
#include "ctxprune/tensor.hpp"

namespace ctxprune {

/// Masks for the three modules of one layer, in stage_kinds() order. Each is
/// [P x 1] (one value per frame or token) or [1 x 1] (whole utterance).
struct LayerGates {
  std::array<Tensor, kModulesPerLayer> masks;
};

/// Supplies gates layer by layer while a stack runs, so a predictor can look
/// at each layer's input before that layer executes.
class LayerGater {
 public:
  virtual ~LayerGater() = default;
  virtual LayerGates gates_for(Stage stage, std::size_t layer, const Tensor& layer_input) = 0;
};

struct LayerActivations {
  /// x^0 (frontend output) through x^L; every entry is [T x d_model].
  std::vector<Tensor> boundaries;
  /// Final-normed encoder output handed to the decoder.
  Tensor output;
};

/// Small encoder-decoder. Encoder layers run a self-attention branch and a
/// cgMLP branch in parallel, merge them with a bias-free linear map, then
/// apply an FFN; decoder layers are self-attention, source attention, FFN.
/// Every sub-module has a pre-norm and a residual connection, and its gate
/// multiplies the residual-branch output.
class ToyModel {
 public:
  ToyModel(const ModelConfig& config, ParamStore& store, RngState rng);

  const ModelConfig& config() const { return config_; }

  /// Input projection plus sinusoidal positions.
  Tensor frontend(const Tensor& features) const;

  /// `gater` may be null in Dense mode.
  LayerActivations encode(const Tensor& features, ExecMode mode, LayerGater* gater, ExecStats* stats = nullptr) const;

  /// Next-token logits [L x vocab] for decoder input ids (causal).
  Tensor decode(std::span<const int> inputs, const Tensor& memory, ExecMode mode, LayerGater* gater,
                ExecStats* stats = nullptr) const;

  // Module bodies (pre-norm included). Exposed for execution-semantics tests.
  Tensor enc_self_attention(std::size_t layer, const Tensor& x, std::span<const std::uint8_t> key_keep = {}) const;
  Tensor cgmlp(std::size_t layer, const Tensor& x) const;
  Tensor enc_ffn(std::size_t layer, const Tensor& x) const;
  Tensor dec_self_attention(std::size_t layer, const Tensor& y, std::span<const std::uint8_t> key_keep = {}) const;
  Tensor dec_src_attention(std::size_t layer, const Tensor& y, const Tensor& memory) const;
  Tensor dec_ffn(std::size_t layer, const Tensor& y) const;

  ModuleBody body(const PrunableModuleSpec& spec, const Tensor& memory = {}) const;

 private:
  struct EncoderLayer {
    Norm attn_norm;
    AttentionWeights attn;
    Norm cg_norm;
    Linear cg_up;      // d -> 2 d_ffn
    Tensor cg_kernel;  // [K x d_ffn]
    Tensor cg_bias;    // [d_ffn]
    Linear cg_down;    // d_ffn -> d
    Linear merge;      // 2d -> d, no bias
    Norm ffn_norm;
    Linear ffn_in, ffn_out;
  };
  struct DecoderLayer {
    Norm self_norm;
    AttentionWeights self_attn;
    Norm src_norm;
    AttentionWeights src_attn;
    Norm ffn_norm;
    Linear ffn_in, ffn_out;
  };

  Tensor run_module(ExecMode mode, const PrunableModuleSpec& spec, const ModuleBody& body, const Tensor& x,
                    const Tensor& mask, ExecStats* stats) const;

  ModelConfig config_;
  Linear input_proj_;
  std::vector<EncoderLayer> enc_;
  Norm enc_final_norm_;
  Tensor token_embedding_;
  std::vector<DecoderLayer> dec_;
  Norm dec_final_norm_;
  Linear output_proj_;
};

/// Gater that replays a fixed decision table (see GateSet); implemented in gates.cpp.
class GateSet;
LayerActivations encoder_forward(const ToyModel& model, const Tensor& features, const GateSet& gates, ExecMode mode,
                                 ExecStats* stats = nullptr);
Tensor decoder_forward(const ToyModel& model, std::span<const int> inputs, const Tensor& memory, const GateSet& gates,
                       ExecMode mode, ExecStats* stats = nullptr);

}  // namespace ctxprune

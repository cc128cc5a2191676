#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "ctxprune/context.hpp"
#include "ctxprune/model.hpp"
#include "ctxprune/nn.hpp"
#include "ctxprune/rng.hpp"

namespace ctxprune {

enum class Granularity { Position, Utterance };

/// Decisions for one module of one layer. `probability` and `decision` hold
/// one slot per frame/token, or a single slot for utterance-wise gating.
struct GateEntry {
  Stage stage = Stage::Encoder;
  std::size_t layer = 0;
  ModuleKind kind = ModuleKind::EncSelfAttn;
  Granularity granularity = Granularity::Position;
  std::vector<double> probability;
  std::vector<std::uint8_t> decision;
  /// Softmax keep probabilities [P x 1]; differentiable in training.
  Tensor keep_prob;
  /// Mask actually applied [P x 1]; carries the straight-through gradient in training.
  Tensor mask;
};

/// Binary keep/prune table indexed by (layer, module, position).
class GateSet {
 public:
  void put(GateEntry entry);
  const GateEntry* find(ModuleKind kind, std::size_t layer) const;
  /// Throws ContractError when missing.
  const GateEntry& at(ModuleKind kind, std::size_t layer) const;
  const std::vector<GateEntry>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }

  /// Sequence length (frames or tokens) the set was produced for.
  void set_length(Stage stage, std::size_t n) { lengths_[stage == Stage::Encoder ? 0 : 1] = n; }
  std::size_t length(Stage stage) const { return lengths_[stage == Stage::Encoder ? 0 : 1]; }

  /// Fraction of kept slots, counting utterance slots once per position.
  double decision_rate(std::optional<Stage> stage = std::nullopt) const;
  double mean_probability(std::optional<Stage> stage = std::nullopt) const;

  /// Every module of both stages with the same decision.
  static GateSet uniform(const ModelConfig& config, std::size_t frames, std::size_t tokens, Granularity granularity,
                         bool keep);

 private:
  std::vector<GateEntry> entries_;
  std::array<std::size_t, 2> lengths_{0, 0};
};

/// decision = 1 iff p >= threshold (ties keep).
std::vector<std::uint8_t> binarize_inference(std::span<const double> probabilities, double threshold);

struct GateSampling {
  bool training = false;
  double temperature = 1.0;
  double threshold = 0.5;
  /// Gumbel noise on/off (off only for consistency checks).
  bool noise = true;
};

/// Context memory of a local gate predictor for one forward pass.
struct GatePredictorState {
  std::vector<Tensor> keys;    // D^C entries of [T x D]
  std::vector<Tensor> values;  // same shapes as keys

  std::size_t count() const { return keys.size(); }
  std::size_t positions() const { return keys.empty() ? 0 : keys[0].rows(); }
  /// [T x D^C x D] snapshots.
  Tensor stacked_keys() const { return stack_streams(keys); }
  Tensor stacked_values() const { return stack_streams(values); }
};

/// Per-layer cross-attention gate predictor for one stage.
///
/// For layer i with input x (T x D): a = softmax(x K^T) V + x, computed
/// independently per position over the D^C context entries, then one
/// two-class linear head per module maps a to (keep, prune) logits. After the
/// heads run, x is appended to the keys and a linear projection of x to the
/// values, so deeper layers also see earlier layer inputs.
class LocalGatePredictor {
 public:
  LocalGatePredictor(ParamStore& store, const std::string& prefix, const ModelConfig& config, Stage stage,
                     const ContextConfig& context, const std::vector<std::size_t>& stream_dims, RngState& rng);

  /// Aligns and projects the bundle (keys) and applies the initial value
  /// projection (values).
  GatePredictorState init_state(const ContextBundle& bundle, std::size_t positions) const;

  /// Gate logits [T x 2] per module slot; appends x to `state`.
  std::array<Tensor, kModulesPerLayer> layer_logits(std::size_t layer, const Tensor& x, GatePredictorState& state) const;

  /// Residual-attended query a^i (does not modify state).
  Tensor attend(const Tensor& x, const GatePredictorState& state) const;

  Stage stage() const { return stage_; }
  std::size_t width() const { return width_; }
  const ContextConfig& context() const { return context_; }

 private:
  Stage stage_;
  std::size_t width_;
  bool scaled_;
  ContextConfig context_;
  ContextProjector projector_;
  Linear init_value_;
  std::vector<Linear> value_proj_;
  std::vector<std::array<Linear, kModulesPerLayer>> heads_;
};

struct ModuleGateOutput {
  Tensor mask;       // [P x 1] of {0,1}; carries a straight-through gradient in training
  Tensor keep_prob;  // [P x 1] softmax keep probability
};

/// One LocalGP step: logits, SGSE sample (training) or threshold (inference),
/// and the state update. With `pool` the per-position logits are averaged
/// into one utterance-level decision.
std::array<ModuleGateOutput, kModulesPerLayer> local_gate_forward(const LocalGatePredictor& predictor, std::size_t layer,
                                                                  const Tensor& x, GatePredictorState& state,
                                                                  RngState& rng, const GateSampling& sampling,
                                                                  bool pool = false);

/// Utterance-wise predictor: a two-layer MLP on [mean-pooled frontend ||
/// context-id embedding] emitting one (keep, prune) pair per module of both
/// stages (encoder layers first, then decoder layers; slot order per layer).
class GlobalGatePredictor {
 public:
  GlobalGatePredictor(ParamStore& store, const std::string& prefix, const ModelConfig& config, RngState& rng);

  /// pooled: [1 x d_model]. Returns [M x 2].
  Tensor logits(const Tensor& pooled, int context_id) const;
  std::size_t module_count() const { return n_modules_; }

 private:
  ModelConfig config_;
  Tensor context_embedding_;
  Linear hidden_, out_;
  std::size_t n_modules_;
};

/// Utterance-wise GateSet for every module of both stages.
GateSet global_gate_forward(const GlobalGatePredictor& predictor, const Tensor& pooled, int context_id, RngState& rng,
                            const GateSampling& sampling, const ModelConfig& config, std::size_t frames,
                            std::size_t tokens);

/// Replays a GateSet. Position entries become [P x 1] masks, utterance
/// entries [1 x 1]; a missing entry or wrong length is a ContractError.
class FixedGater : public LayerGater {
 public:
  explicit FixedGater(const GateSet& gates) : gates_(gates) {}
  LayerGates gates_for(Stage stage, std::size_t layer, const Tensor& layer_input) override;

 private:
  const GateSet& gates_;
};

/// Runs LocalGP for the gated stages while the model executes and records
/// every decision. Ungated stages get all-keep gates (probability 1).
class LocalGater : public LayerGater {
 public:
  struct Stages {
    bool encoder = true;
    bool decoder = false;
  };

  LocalGater(const LocalGatePredictor* encoder, const LocalGatePredictor* decoder, ContextBundle encoder_bundle,
             ContextBundle decoder_bundle, ExecMode mode, GateSampling sampling, RngState rng, Stages stages);

  LayerGates gates_for(Stage stage, std::size_t layer, const Tensor& layer_input) override;

  const GateSet& gates() const { return gates_; }
  const GatePredictorState& state(Stage stage) const { return state_[stage == Stage::Encoder ? 0 : 1]; }

  /// Call before a decoder-only pass when the encoder was not run through this gater.
  void set_encoder_front(const Tensor& x0) { encoder_front_ = x0; }

 private:
  const LocalGatePredictor* predictor_[2];
  Tensor encoder_front_;
  ContextBundle bundle_[2];
  GatePredictorState state_[2];
  ExecMode mode_;
  GateSampling sampling_;
  RngState rng_;
  Stages stages_;
  GateSet gates_;
};

/// GlobalGP: computes every gate once, from the frontend output seen at
/// encoder layer 0, then replays them.
class GlobalGater : public LayerGater {
 public:
  GlobalGater(const GlobalGatePredictor* predictor, const ModelConfig& config, int context_id, ExecMode mode,
              GateSampling sampling, RngState rng, LocalGater::Stages stages);

  LayerGates gates_for(Stage stage, std::size_t layer, const Tensor& layer_input) override;
  const GateSet& gates() const { return gates_; }

 private:
  const GlobalGatePredictor* predictor_;
  ModelConfig config_;
  int context_id_;
  ExecMode mode_;
  GateSampling sampling_;
  RngState rng_;
  LocalGater::Stages stages_;
  bool ready_ = false;
  GateSet gates_;
};

/// Keep-all masks for a layer ([P x 1] or [1 x 1]).
LayerGates keep_all_gates(std::size_t positions, ExecMode mode);

/// Context of the decoder predictor: the encoder's streams plus lang2vec.
ContextConfig decoder_context(const ContextConfig& encoder_context);

/// Raw width of every stream of `context`, in order.
std::vector<std::size_t> stream_dims(const ContextConfig& context, const ProviderConfig& provider, std::size_t d_model);

/// Inserts the front stream (`front`, [T_f x d_model]) at its configured
/// position; a no-op for configurations without it.
ContextBundle with_front(const ContextBundle& bundle, const ContextConfig& context, const Tensor& front);

}  // namespace ctxprune

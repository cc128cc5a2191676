#include "ctxprune/gates.hpp"

#include <algorithm>
#include <cmath>

#include "ctxprune/errors.hpp"
#include "ctxprune/ops.hpp"

namespace ctxprune {

namespace {

std::size_t stage_index(Stage stage) { return stage == Stage::Encoder ? 0 : 1; }

// Gate head: small weights, bias favouring keep.
Linear make_gate_head(ParamStore& store, const std::string& name, std::size_t in, std::size_t pairs, double keep_bias,
                      RngState& rng) {
  Linear head = make_linear(store, name, in, 2 * pairs, rng);
  for (auto& w : head.weight.mutable_data()) w = 0.01 * rng.normal();
  auto b = head.bias.mutable_data();
  for (std::size_t m = 0; m < pairs; ++m) {
    b[2 * m] = keep_bias;
    b[2 * m + 1] = 0.0;
  }
  return head;
}

Tensor column_vector(const std::vector<double>& values) { return Tensor({values.size(), 1}, values); }

std::vector<double> values_of(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

GateEntry make_entry(Stage stage, std::size_t layer, std::size_t slot, Granularity granularity, const Tensor& keep_prob,
                     const Tensor& mask) {
  GateEntry e;
  e.stage = stage;
  e.layer = layer;
  e.kind = stage_kinds(stage)[slot];
  e.granularity = granularity;
  e.probability = values_of(keep_prob);
  e.decision = mask_decisions(mask);
  e.keep_prob = keep_prob;
  e.mask = mask;
  return e;
}

// Sample or threshold [P x 2] logits into a mask and keep probability.
ModuleGateOutput decide(const Tensor& logits, RngState& rng, const GateSampling& sampling) {
  ModuleGateOutput out;
  out.keep_prob = slice(softmax(logits, 1), 1, 0, 1);
  if (sampling.training) {
    const Tensor hard = gumbel_softmax_st(logits, rng, {sampling.temperature, true, sampling.noise});
    out.mask = slice(hard, 1, 0, 1);
  } else {
    const auto probs = values_of(out.keep_prob);
    const auto keep = binarize_inference(probs, sampling.threshold);
    out.mask = column_vector(std::vector<double>(keep.begin(), keep.end()));
  }
  return out;
}

}  // namespace

void GateSet::put(GateEntry entry) {
  if (entry.probability.size() != entry.decision.size()) {
    throw ContractError("gate entry has " + std::to_string(entry.probability.size()) + " probabilities but " +
                        std::to_string(entry.decision.size()) + " decisions");
  }
  for (auto& e : entries_) {
    if (e.kind == entry.kind && e.layer == entry.layer) {
      e = std::move(entry);
      return;
    }
  }
  entries_.push_back(std::move(entry));
}

const GateEntry* GateSet::find(ModuleKind kind, std::size_t layer) const {
  for (const auto& e : entries_)
    if (e.kind == kind && e.layer == layer) return &e;
  return nullptr;
}

const GateEntry& GateSet::at(ModuleKind kind, std::size_t layer) const {
  const GateEntry* e = find(kind, layer);
  if (e == nullptr) {
    throw ContractError("no gate for " + std::string(to_string(kind)) + " layer " + std::to_string(layer));
  }
  return *e;
}

double GateSet::decision_rate(std::optional<Stage> stage) const {
  double kept = 0.0, total = 0.0;
  for (const auto& e : entries_) {
    if (stage && e.stage != *stage) continue;
    const double w = e.granularity == Granularity::Utterance ? std::max<double>(1.0, static_cast<double>(length(e.stage))) : 1.0;
    for (auto d : e.decision) kept += w * d;
    total += w * static_cast<double>(e.decision.size());
  }
  return total > 0.0 ? kept / total : 1.0;
}

double GateSet::mean_probability(std::optional<Stage> stage) const {
  double sum = 0.0, total = 0.0;
  for (const auto& e : entries_) {
    if (stage && e.stage != *stage) continue;
    const double w = e.granularity == Granularity::Utterance ? std::max<double>(1.0, static_cast<double>(length(e.stage))) : 1.0;
    for (auto p : e.probability) sum += w * p;
    total += w * static_cast<double>(e.probability.size());
  }
  return total > 0.0 ? sum / total : 1.0;
}

GateSet GateSet::uniform(const ModelConfig& config, std::size_t frames, std::size_t tokens, Granularity granularity,
                         bool keep) {
  GateSet set;
  set.set_length(Stage::Encoder, frames);
  set.set_length(Stage::Decoder, tokens);
  for (Stage stage : {Stage::Encoder, Stage::Decoder}) {
    const std::size_t n = granularity == Granularity::Utterance ? 1 : set.length(stage);
    for (const auto& spec : prunable_modules(config, stage)) {
      GateEntry e;
      e.stage = stage;
      e.layer = spec.layer_index;
      e.kind = spec.kind;
      e.granularity = granularity;
      e.probability.assign(n, keep ? 1.0 : 0.0);
      e.decision.assign(n, keep ? 1 : 0);
      set.put(std::move(e));
    }
  }
  return set;
}

std::vector<std::uint8_t> binarize_inference(std::span<const double> probabilities, double threshold) {
  std::vector<std::uint8_t> out(probabilities.size());
  for (std::size_t i = 0; i < probabilities.size(); ++i) out[i] = probabilities[i] >= threshold ? 1 : 0;
  return out;
}

LocalGatePredictor::LocalGatePredictor(ParamStore& store, const std::string& prefix, const ModelConfig& config,
                                       Stage stage, const ContextConfig& context,
                                       const std::vector<std::size_t>& stream_dims, RngState& rng)
    : stage_(stage), width_(config.context_dim), scaled_(config.scaled_gate_attention), context_(context) {
  config.validate();
  if (context.size() == 0) throw ParameterError("gate predictor needs at least one context stream");
  projector_ = ContextProjector(store, prefix + ".ctx", context, stream_dims, width_, rng);
  init_value_ = make_linear(store, prefix + ".init_value", width_, width_, rng);
  for (std::size_t l = 0; l < config.n_layers(stage); ++l) {
    const std::string p = prefix + "." + std::to_string(l);
    value_proj_.push_back(make_linear(store, p + ".value_proj", width_, width_, rng));
    std::array<Linear, kModulesPerLayer> heads;
    for (std::size_t n = 0; n < kModulesPerLayer; ++n) {
      heads[n] = make_gate_head(store, p + ".head_" + std::string(to_string(stage_kinds(stage)[n])), width_, 1,
                                config.gate_keep_bias, rng);
    }
    heads_.push_back(std::move(heads));
  }
}

GatePredictorState LocalGatePredictor::init_state(const ContextBundle& bundle, std::size_t positions) const {
  GatePredictorState state;
  state.keys = projector_.align(bundle, positions);
  for (const auto& k : state.keys) state.values.push_back(init_value_(k));
  return state;
}

Tensor LocalGatePredictor::attend(const Tensor& x, const GatePredictorState& state) const {
  if (x.rank() != 2 || x.cols() != width_) {
    throw ContractError("gate query has shape " + shape_string(x.shape()) + ", predictor width is " +
                        std::to_string(width_));
  }
  if (state.count() == 0) throw ContractError("gate predictor state is empty");
  if (state.positions() != x.rows() || state.keys[0].cols() != width_) {
    throw ContractError("gate state is " + shape_string(state.keys[0].shape()) + " but query is " +
                        shape_string(x.shape()));
  }
  std::vector<Tensor> scores;
  scores.reserve(state.count());
  for (const auto& k : state.keys) scores.push_back(sum_axis(mul(x, k), 1));
  Tensor s = concat(scores, 1);
  if (scaled_) s = scale(s, 1.0 / std::sqrt(static_cast<double>(width_)));
  const Tensor att = softmax(s, 1);
  Tensor a = x;
  for (std::size_t j = 0; j < state.count(); ++j) a = add(a, mul(slice(att, 1, j, 1), state.values[j]));
  return a;
}

std::array<Tensor, kModulesPerLayer> LocalGatePredictor::layer_logits(std::size_t layer, const Tensor& x,
                                                                      GatePredictorState& state) const {
  if (layer >= heads_.size()) throw ContractError("gate predictor has no layer " + std::to_string(layer));
  const Tensor a = attend(x, state);
  std::array<Tensor, kModulesPerLayer> logits;
  for (std::size_t n = 0; n < kModulesPerLayer; ++n) logits[n] = heads_[layer][n](a);
  state.keys.push_back(x);
  state.values.push_back(value_proj_[layer](x));
  return logits;
}

std::array<ModuleGateOutput, kModulesPerLayer> local_gate_forward(const LocalGatePredictor& predictor, std::size_t layer,
                                                                  const Tensor& x, GatePredictorState& state,
                                                                  RngState& rng, const GateSampling& sampling,
                                                                  bool pool) {
  auto logits = predictor.layer_logits(layer, x, state);
  std::array<ModuleGateOutput, kModulesPerLayer> out;
  for (std::size_t n = 0; n < kModulesPerLayer; ++n) {
    out[n] = decide(pool ? mean_rows(logits[n]) : logits[n], rng, sampling);
  }
  return out;
}

GlobalGatePredictor::GlobalGatePredictor(ParamStore& store, const std::string& prefix, const ModelConfig& config,
                                         RngState& rng)
    : config_(config), n_modules_(kModulesPerLayer * (config.n_enc_layers + config.n_dec_layers)) {
  config_.validate();
  context_embedding_ =
      store.add(prefix + ".context_embedding", random_normal({config.n_context_ids, config.context_embed_dim}, 1.0, rng));
  hidden_ = make_linear(store, prefix + ".hidden", config.d_model + config.context_embed_dim, config.global_hidden, rng);
  out_ = make_gate_head(store, prefix + ".out", config.global_hidden, n_modules_, config.gate_keep_bias, rng);
}

Tensor GlobalGatePredictor::logits(const Tensor& pooled, int context_id) const {
  if (pooled.rank() != 2 || pooled.rows() != 1 || pooled.cols() != config_.d_model) {
    throw DimensionError("global gate input must be [1 x " + std::to_string(config_.d_model) + "], got " +
                         shape_string(pooled.shape()));
  }
  if (context_id < 0 || static_cast<std::size_t>(context_id) >= config_.n_context_ids) {
    throw ParameterError("context id " + std::to_string(context_id) + " out of range");
  }
  const int id[1] = {context_id};
  const Tensor h = gelu(hidden_(concat({pooled, embed(context_embedding_, id)}, 1)));
  const Tensor flat = out_(h);
  std::vector<Tensor> rows;
  rows.reserve(n_modules_);
  for (std::size_t m = 0; m < n_modules_; ++m) rows.push_back(slice(flat, 1, 2 * m, 2));
  return concat(rows, 0);
}

GateSet global_gate_forward(const GlobalGatePredictor& predictor, const Tensor& pooled, int context_id, RngState& rng,
                            const GateSampling& sampling, const ModelConfig& config, std::size_t frames,
                            std::size_t tokens) {
  const ModuleGateOutput all = decide(predictor.logits(pooled, context_id), rng, sampling);
  GateSet set;
  set.set_length(Stage::Encoder, frames);
  set.set_length(Stage::Decoder, tokens);
  std::size_t m = 0;
  for (Stage stage : {Stage::Encoder, Stage::Decoder}) {
    for (std::size_t l = 0; l < config.n_layers(stage); ++l) {
      for (std::size_t n = 0; n < kModulesPerLayer; ++n, ++m) {
        set.put(make_entry(stage, l, n, Granularity::Utterance, slice(all.keep_prob, 0, m, 1), slice(all.mask, 0, m, 1)));
      }
    }
  }
  return set;
}

LayerGates keep_all_gates(std::size_t positions, ExecMode mode) {
  LayerGates g;
  const std::size_t n = mode == ExecMode::Utterance ? 1 : positions;
  for (auto& m : g.masks) m = Tensor::full({n, 1}, 1.0);
  return g;
}

LayerGates FixedGater::gates_for(Stage stage, std::size_t layer, const Tensor& layer_input) {
  LayerGates g;
  for (std::size_t n = 0; n < kModulesPerLayer; ++n) {
    const GateEntry& e = gates_.at(stage_kinds(stage)[n], layer);
    if (e.granularity == Granularity::Position && e.decision.size() != layer_input.rows()) {
      throw ContractError(std::string(to_string(e.kind)) + " layer " + std::to_string(layer) + " has " +
                          std::to_string(e.decision.size()) + " gates for " + std::to_string(layer_input.rows()) +
                          " positions");
    }
    if (e.granularity == Granularity::Utterance && e.decision.size() != 1) {
      throw ContractError("utterance gate must hold one decision");
    }
    g.masks[n] = column_vector(std::vector<double>(e.decision.begin(), e.decision.end()));
  }
  return g;
}

ContextConfig decoder_context(const ContextConfig& encoder_context) {
  ContextConfig c = encoder_context;
  if (!c.has(StreamKind::Lang2Vec)) c.streams.push_back(StreamKind::Lang2Vec);
  return c;
}

std::vector<std::size_t> stream_dims(const ContextConfig& context, const ProviderConfig& provider, std::size_t d_model) {
  std::vector<std::size_t> dims;
  for (auto kind : context.streams) dims.push_back(provider.dim(kind, d_model));
  return dims;
}

ContextBundle with_front(const ContextBundle& bundle, const ContextConfig& context, const Tensor& front) {
  if (!context.has(StreamKind::Front)) return bundle;
  ContextBundle out;
  std::size_t next = 0;
  for (auto kind : context.streams) {
    if (kind == StreamKind::Front) {
      out.streams.push_back({StreamKind::Front, front});
    } else {
      if (next >= bundle.size() || bundle.streams[next].kind != kind) {
        throw ContractError("context bundle does not match configuration " + context.name());
      }
      out.streams.push_back(bundle.streams[next++]);
    }
  }
  return out;
}

LocalGater::LocalGater(const LocalGatePredictor* encoder, const LocalGatePredictor* decoder,
                       ContextBundle encoder_bundle, ContextBundle decoder_bundle, ExecMode mode, GateSampling sampling,
                       RngState rng, Stages stages)
    : predictor_{encoder, decoder},
      bundle_{std::move(encoder_bundle), std::move(decoder_bundle)},
      mode_(mode),
      sampling_(sampling),
      rng_(rng),
      stages_(stages) {
  if (mode == ExecMode::Dense) throw ParameterError("a gater is only used in temporal or utterance mode");
  if (stages.encoder && encoder == nullptr) throw ParameterError("encoder gating needs an encoder predictor");
  if (stages.decoder && decoder == nullptr) throw ParameterError("decoder gating needs a decoder predictor");
}

LayerGates LocalGater::gates_for(Stage stage, std::size_t layer, const Tensor& layer_input) {
  const std::size_t s = stage_index(stage);
  const std::size_t positions = layer_input.rows();
  const bool gated = stage == Stage::Encoder ? stages_.encoder : stages_.decoder;
  const Granularity granularity = mode_ == ExecMode::Utterance ? Granularity::Utterance : Granularity::Position;
  if (stage == Stage::Encoder && layer == 0) encoder_front_ = layer_input;
  if (layer == 0) gates_.set_length(stage, positions);

  LayerGates g;
  if (!gated) {
    g = keep_all_gates(positions, mode_);
    for (std::size_t n = 0; n < kModulesPerLayer; ++n) {
      gates_.put(make_entry(stage, layer, n, granularity, g.masks[n], g.masks[n]));
    }
    return g;
  }

  const LocalGatePredictor& predictor = *predictor_[s];
  if (layer == 0) {
    Tensor front;
    if (predictor.context().has(StreamKind::Front)) {
      if (!encoder_front_.defined()) throw ContractError("decoder gating needs the encoder frontend output");
      front = stage == Stage::Encoder ? encoder_front_ : mean_rows(encoder_front_);
    }
    state_[s] = predictor.init_state(with_front(bundle_[s], predictor.context(), front), positions);
  }
  if (state_[s].count() == 0) throw ContractError("gater state was not initialized at layer 0");

  const auto out = local_gate_forward(predictor, layer, layer_input, state_[s], rng_, sampling_,
                                      mode_ == ExecMode::Utterance);
  for (std::size_t n = 0; n < kModulesPerLayer; ++n) {
    g.masks[n] = out[n].mask;
    gates_.put(make_entry(stage, layer, n, granularity, out[n].keep_prob, out[n].mask));
  }
  return g;
}

GlobalGater::GlobalGater(const GlobalGatePredictor* predictor, const ModelConfig& config, int context_id,
                         ExecMode mode, GateSampling sampling, RngState rng, LocalGater::Stages stages)
    : predictor_(predictor),
      config_(config),
      context_id_(context_id),
      mode_(mode),
      sampling_(sampling),
      rng_(rng),
      stages_(stages) {
  if (predictor == nullptr) throw ParameterError("global gater needs a predictor");
  if (mode == ExecMode::Dense) throw ParameterError("a gater is only used in temporal or utterance mode");
}

LayerGates GlobalGater::gates_for(Stage stage, std::size_t layer, const Tensor& layer_input) {
  if (stage == Stage::Encoder && layer == 0) {
    gates_ = global_gate_forward(*predictor_, mean_rows(layer_input), context_id_, rng_, sampling_, config_,
                                 layer_input.rows(), 0);
    ready_ = true;
  }
  if (!ready_) throw ContractError("global gates are computed at encoder layer 0; run the encoder first");
  if (layer == 0) gates_.set_length(stage, layer_input.rows());
  const bool gated = stage == Stage::Encoder ? stages_.encoder : stages_.decoder;
  LayerGates g;
  for (std::size_t n = 0; n < kModulesPerLayer; ++n) {
    const ModuleKind kind = stage_kinds(stage)[n];
    if (!gated) {
      // Replace the prediction with an explicit keep so statistics match execution.
      const Tensor one = Tensor::full({1, 1}, 1.0);
      gates_.put(make_entry(stage, layer, n, Granularity::Utterance, one, one));
    }
    g.masks[n] = gates_.at(kind, layer).mask;
  }
  return g;
}

}  // namespace ctxprune

namespace ctxprune {

LayerActivations encoder_forward(const ToyModel& model, const Tensor& features, const GateSet& gates, ExecMode mode,
                                 ExecStats* stats) {
  FixedGater gater(gates);
  return model.encode(features, mode, mode == ExecMode::Dense ? nullptr : &gater, stats);
}

Tensor decoder_forward(const ToyModel& model, std::span<const int> inputs, const Tensor& memory, const GateSet& gates,
                       ExecMode mode, ExecStats* stats) {
  FixedGater gater(gates);
  return model.decode(inputs, memory, mode, mode == ExecMode::Dense ? nullptr : &gater, stats);
}

}  // namespace ctxprune

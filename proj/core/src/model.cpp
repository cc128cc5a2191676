#include "ctxprune/model.hpp"

#include <json.hpp>

#include "ctxprune/errors.hpp"
#include "ctxprune/ops.hpp"

namespace ctxprune {

std::string_view to_string(Stage stage) { return stage == Stage::Encoder ? "enc" : "dec"; }

std::string_view to_string(ModuleKind kind) {
  switch (kind) {
    case ModuleKind::EncSelfAttn: return "enc_self_attn";
    case ModuleKind::EncCgMLP: return "enc_cgmlp";
    case ModuleKind::EncFFN: return "enc_ffn";
    case ModuleKind::DecSelfAttn: return "dec_self_attn";
    case ModuleKind::DecSrcAttn: return "dec_src_attn";
    case ModuleKind::DecFFN: return "dec_ffn";
  }
  return "?";
}

Stage stage_from_string(std::string_view s) {
  if (s == "enc") return Stage::Encoder;
  if (s == "dec") return Stage::Decoder;
  throw ParameterError("unknown stage '" + std::string(s) + "'");
}

ModuleKind module_kind_from_string(std::string_view s) {
  for (auto k : kEncoderKinds)
    if (to_string(k) == s) return k;
  for (auto k : kDecoderKinds)
    if (to_string(k) == s) return k;
  throw ContractError("unknown module kind '" + std::string(s) + "'");
}

Stage stage_of(ModuleKind kind) {
  switch (kind) {
    case ModuleKind::EncSelfAttn:
    case ModuleKind::EncCgMLP:
    case ModuleKind::EncFFN: return Stage::Encoder;
    default: return Stage::Decoder;
  }
}

std::size_t module_slot(ModuleKind kind) {
  switch (kind) {
    case ModuleKind::EncSelfAttn:
    case ModuleKind::DecSelfAttn: return 0;
    case ModuleKind::EncCgMLP:
    case ModuleKind::DecSrcAttn: return 1;
    default: return 2;
  }
}

const std::array<ModuleKind, 3>& stage_kinds(Stage stage) {
  return stage == Stage::Encoder ? kEncoderKinds : kDecoderKinds;
}

std::string_view to_string(ExecMode mode) {
  switch (mode) {
    case ExecMode::Dense: return "dense";
    case ExecMode::Temporal: return "temporal";
    case ExecMode::Utterance: return "utterance";
  }
  return "?";
}

ExecMode exec_mode_from_string(std::string_view s) {
  if (s == "dense") return ExecMode::Dense;
  if (s == "temporal") return ExecMode::Temporal;
  if (s == "utterance") return ExecMode::Utterance;
  throw ParameterError("unknown execution mode '" + std::string(s) + "'");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ParameterError("model config: " + msg); };
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) fail("d_model must be a positive multiple of n_heads");
  if (cgmlp_kernel == 0 || cgmlp_kernel % 2 == 0) fail("cgmlp_kernel must be odd and >= 1");
  if (n_enc_layers == 0 || n_dec_layers == 0) fail("need at least one encoder and one decoder layer");
  if (d_ffn == 0 || vocab_size < 2 || max_frames == 0 || feature_dim == 0) fail("sizes must be positive");
  if (!(target_keep_ratio > 0.0 && target_keep_ratio <= 1.0)) fail("target_keep_ratio must be in (0, 1]");
  if (!(gate_temperature > 0.0)) fail("gate_temperature must be positive");
  if (!(gate_threshold > 0.0 && gate_threshold < 1.0)) fail("gate_threshold must be in (0, 1)");
  if (context_dim != d_model) fail("context_dim must equal d_model (layer inputs are the gate queries)");
  if (n_context_ids == 0) fail("n_context_ids must be positive");
}

std::string ModelConfig::to_json() const {
  nlohmann::json j{{"d_model", d_model},
                   {"n_heads", n_heads},
                   {"n_enc_layers", n_enc_layers},
                   {"n_dec_layers", n_dec_layers},
                   {"d_ffn", d_ffn},
                   {"cgmlp_kernel", cgmlp_kernel},
                   {"vocab_size", vocab_size},
                   {"max_frames", max_frames},
                   {"feature_dim", feature_dim},
                   {"target_keep_ratio", target_keep_ratio},
                   {"gate_temperature", gate_temperature},
                   {"gate_threshold", gate_threshold},
                   {"context_dim", context_dim},
                   {"scaled_gate_attention", scaled_gate_attention},
                   {"global_hidden", global_hidden},
                   {"context_embed_dim", context_embed_dim},
                   {"n_context_ids", n_context_ids},
                   {"gate_keep_bias", gate_keep_bias}};
  return j.dump(2);
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  ModelConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("d_model", c.d_model);
  get("n_heads", c.n_heads);
  get("n_enc_layers", c.n_enc_layers);
  get("n_dec_layers", c.n_dec_layers);
  get("d_ffn", c.d_ffn);
  get("cgmlp_kernel", c.cgmlp_kernel);
  get("vocab_size", c.vocab_size);
  get("max_frames", c.max_frames);
  get("feature_dim", c.feature_dim);
  get("target_keep_ratio", c.target_keep_ratio);
  get("gate_temperature", c.gate_temperature);
  get("gate_threshold", c.gate_threshold);
  c.context_dim = c.d_model;
  get("context_dim", c.context_dim);
  get("scaled_gate_attention", c.scaled_gate_attention);
  get("global_hidden", c.global_hidden);
  get("context_embed_dim", c.context_embed_dim);
  get("n_context_ids", c.n_context_ids);
  get("gate_keep_bias", c.gate_keep_bias);
  c.validate();
  return c;
}

std::vector<PrunableModuleSpec> prunable_modules(const ModelConfig& config, Stage stage) {
  std::vector<PrunableModuleSpec> out;
  for (std::size_t l = 0; l < config.n_layers(stage); ++l)
    for (auto kind : stage_kinds(stage)) out.push_back({kind, l, module_slot(kind)});
  return out;
}

ToyModel::ToyModel(const ModelConfig& config, ParamStore& store, RngState rng) : config_(config) {
  config_.validate();
  const std::size_t d = config_.d_model, f = config_.d_ffn;
  input_proj_ = make_linear(store, "frontend.proj", config_.feature_dim, d, rng);
  for (std::size_t l = 0; l < config_.n_enc_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    EncoderLayer L;
    L.attn_norm = make_norm(store, p + ".attn_norm", d);
    L.attn = make_attention(store, p + ".attn", d, rng);
    L.cg_norm = make_norm(store, p + ".cg_norm", d);
    L.cg_up = make_linear(store, p + ".cg_up", d, 2 * f, rng);
    // Near-delta kernel: the gate half starts close to identity over frames.
    std::vector<double> kernel(config_.cgmlp_kernel * f);
    for (std::size_t k = 0; k < config_.cgmlp_kernel; ++k)
      for (std::size_t c = 0; c < f; ++c)
        kernel[k * f + c] = (k == config_.cgmlp_kernel / 2 ? 1.0 : 0.0) + 0.1 * rng.normal();
    L.cg_kernel = store.add(p + ".cg_kernel", Tensor({config_.cgmlp_kernel, f}, std::move(kernel)));
    L.cg_bias = store.add(p + ".cg_conv_bias", Tensor::zeros({f}));
    L.cg_down = make_linear(store, p + ".cg_down", f, d, rng);
    L.merge = make_linear(store, p + ".merge", 2 * d, d, rng, /*with_bias=*/false);
    L.ffn_norm = make_norm(store, p + ".ffn_norm", d);
    L.ffn_in = make_linear(store, p + ".ffn_in", d, f, rng);
    L.ffn_out = make_linear(store, p + ".ffn_out", f, d, rng);
    enc_.push_back(std::move(L));
  }
  enc_final_norm_ = make_norm(store, "enc.final_norm", d);
  token_embedding_ = store.add("dec.embedding", random_normal({config_.vocab_size, d}, 0.5, rng));
  for (std::size_t l = 0; l < config_.n_dec_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    DecoderLayer L;
    L.self_norm = make_norm(store, p + ".self_norm", d);
    L.self_attn = make_attention(store, p + ".self_attn", d, rng);
    L.src_norm = make_norm(store, p + ".src_norm", d);
    L.src_attn = make_attention(store, p + ".src_attn", d, rng);
    L.ffn_norm = make_norm(store, p + ".ffn_norm", d);
    L.ffn_in = make_linear(store, p + ".ffn_in", d, f, rng);
    L.ffn_out = make_linear(store, p + ".ffn_out", f, d, rng);
    dec_.push_back(std::move(L));
  }
  dec_final_norm_ = make_norm(store, "dec.final_norm", d);
  output_proj_ = make_linear(store, "dec.output", d, config_.vocab_size, rng);
}

Tensor ToyModel::frontend(const Tensor& features) const {
  if (features.rank() != 2 || features.cols() != config_.feature_dim) {
    throw DimensionError("features must be [T x " + std::to_string(config_.feature_dim) + "], got " +
                         shape_string(features.shape()));
  }
  if (features.rows() == 0 || features.rows() > config_.max_frames) {
    throw ContractError("utterance has " + std::to_string(features.rows()) + " frames; limit is " +
                        std::to_string(config_.max_frames));
  }
  return add(input_proj_(features), sinusoid_positions(features.rows(), config_.d_model));
}

Tensor ToyModel::enc_self_attention(std::size_t layer, const Tensor& x, std::span<const std::uint8_t> key_keep) const {
  const auto& L = enc_.at(layer);
  const Tensor h = L.attn_norm(x);
  return multi_head_attention(L.attn, h, h, config_.n_heads, {false, key_keep});
}

Tensor ToyModel::cgmlp(std::size_t layer, const Tensor& x) const {
  const auto& L = enc_.at(layer);
  const std::size_t f = config_.d_ffn;
  const Tensor up = gelu(L.cg_up(L.cg_norm(x)));
  const Tensor content = slice(up, 1, 0, f);
  const Tensor gate = conv1d_depthwise(slice(up, 1, f, f), L.cg_kernel, L.cg_bias);
  return L.cg_down(mul(content, gate));
}

Tensor ToyModel::enc_ffn(std::size_t layer, const Tensor& x) const {
  const auto& L = enc_.at(layer);
  return L.ffn_out(gelu(L.ffn_in(L.ffn_norm(x))));
}

Tensor ToyModel::dec_self_attention(std::size_t layer, const Tensor& y, std::span<const std::uint8_t> key_keep) const {
  const auto& L = dec_.at(layer);
  const Tensor h = L.self_norm(y);
  return multi_head_attention(L.self_attn, h, h, config_.n_heads, {true, key_keep});
}

Tensor ToyModel::dec_src_attention(std::size_t layer, const Tensor& y, const Tensor& memory) const {
  const auto& L = dec_.at(layer);
  return multi_head_attention(L.src_attn, L.src_norm(y), memory, config_.n_heads);
}

Tensor ToyModel::dec_ffn(std::size_t layer, const Tensor& y) const {
  const auto& L = dec_.at(layer);
  return L.ffn_out(gelu(L.ffn_in(L.ffn_norm(y))));
}

ModuleBody ToyModel::body(const PrunableModuleSpec& spec, const Tensor& memory) const {
  const std::size_t l = spec.layer_index;
  switch (spec.kind) {
    case ModuleKind::EncSelfAttn:
      return [this, l](const Tensor& x, std::span<const std::uint8_t> keep) { return enc_self_attention(l, x, keep); };
    case ModuleKind::EncCgMLP:
      return [this, l](const Tensor& x, std::span<const std::uint8_t>) { return cgmlp(l, x); };
    case ModuleKind::EncFFN:
      return [this, l](const Tensor& x, std::span<const std::uint8_t>) { return enc_ffn(l, x); };
    case ModuleKind::DecSelfAttn:
      return [this, l](const Tensor& y, std::span<const std::uint8_t> keep) { return dec_self_attention(l, y, keep); };
    case ModuleKind::DecSrcAttn:
      if (!memory.defined()) throw ContractError("source attention needs encoder memory");
      return [this, l, memory](const Tensor& y, std::span<const std::uint8_t>) { return dec_src_attention(l, y, memory); };
    case ModuleKind::DecFFN:
      return [this, l](const Tensor& y, std::span<const std::uint8_t>) { return dec_ffn(l, y); };
  }
  throw ContractError("unknown module kind");
}

Tensor ToyModel::run_module(ExecMode mode, const PrunableModuleSpec& spec, const ModuleBody& body, const Tensor& x,
                            const Tensor& mask, ExecStats* stats) const {
  if (mode == ExecMode::Dense) {
    if (stats) stats->record(spec, x.rows(), true);
    return body(x, {});
  }
  if (!mask.defined()) {
    throw ContractError("missing gate for " + std::string(to_string(spec.kind)) + " layer " +
                        std::to_string(spec.layer_index));
  }
  if (mode == ExecMode::Utterance) {
    if (mask.numel() != 1) {
      throw ContractError("utterance mode needs one gate per module, got " + shape_string(mask.shape()));
    }
    return apply_utterance(body, x, mask, stats, spec);
  }
  Tensor frame_mask = mask;
  if (mask.numel() == 1 && x.rows() != 1) frame_mask = mul(Tensor::full({x.rows(), 1}, 1.0), mask);
  if (frame_mask.rank() != 2 || frame_mask.rows() != x.rows() || frame_mask.cols() != 1) {
    throw ContractError("temporal gate for " + std::string(to_string(spec.kind)) + " has shape " +
                        shape_string(frame_mask.shape()) + ", expected [" + std::to_string(x.rows()) + "x1]");
  }
  if (spec.kind == ModuleKind::EncCgMLP) return apply_all_frames(body, x, frame_mask, stats, spec);
  return apply_temporal(body, x, frame_mask, stats, spec);
}

LayerActivations ToyModel::encode(const Tensor& features, ExecMode mode, LayerGater* gater, ExecStats* stats) const {
  if (mode != ExecMode::Dense && gater == nullptr) throw ContractError("gated execution needs a gater");
  LayerActivations acts;
  Tensor x = frontend(features);
  acts.boundaries.push_back(x);
  for (std::size_t l = 0; l < enc_.size(); ++l) {
    LayerGates g;
    if (mode != ExecMode::Dense) g = gater->gates_for(Stage::Encoder, l, x);
    const PrunableModuleSpec sa{ModuleKind::EncSelfAttn, l, 0}, cg{ModuleKind::EncCgMLP, l, 1}, ff{ModuleKind::EncFFN, l, 2};
    const Tensor a = run_module(mode, sa, body(sa), x, g.masks[0], stats);
    const Tensor c = run_module(mode, cg, body(cg), x, g.masks[1], stats);
    x = add(x, enc_[l].merge(concat({a, c}, 1)));
    x = add(x, run_module(mode, ff, body(ff), x, g.masks[2], stats));
    acts.boundaries.push_back(x);
  }
  acts.output = enc_final_norm_(x);
  return acts;
}

Tensor ToyModel::decode(std::span<const int> inputs, const Tensor& memory, ExecMode mode, LayerGater* gater,
                        ExecStats* stats) const {
  if (mode != ExecMode::Dense && gater == nullptr) throw ContractError("gated execution needs a gater");
  if (inputs.empty()) throw ContractError("decoder needs at least one input token");
  Tensor y = add(embed(token_embedding_, inputs), sinusoid_positions(inputs.size(), config_.d_model));
  for (std::size_t l = 0; l < dec_.size(); ++l) {
    LayerGates g;
    if (mode != ExecMode::Dense) g = gater->gates_for(Stage::Decoder, l, y);
    const PrunableModuleSpec sa{ModuleKind::DecSelfAttn, l, 0}, src{ModuleKind::DecSrcAttn, l, 1}, ff{ModuleKind::DecFFN, l, 2};
    y = add(y, run_module(mode, sa, body(sa), y, g.masks[0], stats));
    y = add(y, run_module(mode, src, body(src, memory), y, g.masks[1], stats));
    y = add(y, run_module(mode, ff, body(ff), y, g.masks[2], stats));
  }
  return output_proj_(dec_final_norm_(y));
}

}  // namespace ctxprune

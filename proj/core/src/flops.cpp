#include "ctxprune/flops.hpp"

#include <algorithm>

#include <json.hpp>

#include "ctxprune/errors.hpp"

namespace ctxprune {

namespace {

using u64 = std::uint64_t;

std::size_t kept_rows(const GateEntry& e, std::size_t positions) {
  if (e.granularity == Granularity::Utterance) {
    if (e.decision.size() != 1) throw ContractError("utterance gate must hold one decision");
    return e.decision[0] ? positions : 0;
  }
  if (e.decision.size() != positions) {
    throw ContractError(std::string(to_string(e.kind)) + " layer " + std::to_string(e.layer) + " has " +
                        std::to_string(e.decision.size()) + " decisions for " + std::to_string(positions) +
                        " positions");
  }
  return static_cast<std::size_t>(std::count(e.decision.begin(), e.decision.end(), std::uint8_t{1}));
}

// LocalGP cost for one stage: per layer, scores and weighted sum over the
// growing memory, three 2-way heads, and the value projection of x.
u64 local_gate_cost(std::size_t layers, std::size_t positions, std::size_t initial_streams, std::size_t width) {
  const u64 p = positions, d = width;
  u64 total = 0;
  for (std::size_t i = 0; i < layers; ++i) {
    const u64 n = initial_streams + i;
    total += 2 * p * n * d + kModulesPerLayer * p * d * 2 + p * d * d;
  }
  return total;
}

// Stream projections (applied to at most `positions` rows) plus the initial
// value projection of every aligned stream.
u64 local_context_cost(const std::vector<std::pair<std::size_t, std::size_t>>& streams, std::size_t positions,
                       std::size_t width) {
  u64 total = 0;
  for (const auto& [rows, dim] : streams) {
    total += static_cast<u64>(std::min(rows, positions)) * dim * width;
    total += static_cast<u64>(positions) * width * width;
  }
  return total;
}

nlohmann::json stage_json(const StageFlops& s) {
  return {{"dense_macs", s.dense},
          {"pruned_macs", s.pruned},
          {"fixed_macs", s.fixed},
          {"gate_overhead_macs", s.gate_overhead},
          {"context_overhead_macs", s.context_overhead},
          {"reduction_macs", s.reduction()},
          {"dense_gflops", gflops(s.dense)},
          {"pruned_gflops", gflops(s.pruned + s.gate_overhead + s.context_overhead)}};
}

StageFlops stage_from_json(const nlohmann::json& j) {
  StageFlops s;
  s.dense = j.at("dense_macs").get<u64>();
  s.pruned = j.at("pruned_macs").get<u64>();
  s.fixed = j.at("fixed_macs").get<u64>();
  s.gate_overhead = j.at("gate_overhead_macs").get<u64>();
  s.context_overhead = j.at("context_overhead_macs").get<u64>();
  return s;
}

}  // namespace

std::uint64_t count_flops_module(const PrunableModuleSpec& spec, std::size_t t_effective, const ModelConfig& config,
                                 std::size_t memory_rows) {
  const u64 t = t_effective, d = config.d_model, f = config.d_ffn, k = config.cgmlp_kernel, s = memory_rows;
  switch (spec.kind) {
    case ModuleKind::EncSelfAttn:
    case ModuleKind::DecSelfAttn: return 4 * t * d * d + 2 * t * t * d;
    case ModuleKind::EncFFN:
    case ModuleKind::DecFFN: return 2 * t * d * f;
    case ModuleKind::EncCgMLP: return t * (d * 2 * f + f * k + f * d);
    case ModuleKind::DecSrcAttn:
      if (t == 0) return 0;
      return 2 * t * d * d + 2 * s * d * d + 2 * t * s * d;
  }
  throw ContractError("unknown module kind " + std::to_string(static_cast<int>(spec.kind)));
}

std::int64_t StageFlops::reduction() const {
  return static_cast<std::int64_t>(dense) - static_cast<std::int64_t>(pruned + gate_overhead + context_overhead);
}

StageFlops& StageFlops::operator+=(const StageFlops& o) {
  dense += o.dense;
  pruned += o.pruned;
  fixed += o.fixed;
  gate_overhead += o.gate_overhead;
  context_overhead += o.context_overhead;
  return *this;
}

FlopsReport& FlopsReport::operator+=(const FlopsReport& o) {
  for (const auto& m : o.modules) {
    auto it = std::find_if(modules.begin(), modules.end(), [&](const ModuleFlops& x) {
      return x.stage == m.stage && x.layer == m.layer && x.kind == m.kind;
    });
    if (it == modules.end()) {
      modules.push_back(m);
    } else {
      it->dense += m.dense;
      it->pruned += m.pruned;
    }
  }
  if (utterances == 0) mode = o.mode;
  utterances += o.utterances;
  encoder += o.encoder;
  decoder += o.decoder;
  frontend += o.frontend;
  return *this;
}

double gflops(std::uint64_t macs) { return 2.0 * static_cast<double>(macs) / 1e9; }

FlopsReport count_flops_model(const GateSet& gates, const ModelConfig& config, ExecMode mode,
                              const FlopsOptions& options) {
  FlopsReport r;
  r.mode = mode;
  r.utterances = 1;
  const std::size_t frames = gates.length(Stage::Encoder);
  const u64 d = config.d_model;
  r.frontend = static_cast<u64>(frames) * config.feature_dim * d;

  for (Stage stage : {Stage::Encoder, Stage::Decoder}) {
    const std::size_t positions = gates.length(stage);
    if (positions == 0) continue;
    StageFlops& s = stage == Stage::Encoder ? r.encoder : r.decoder;
    for (const auto& spec : prunable_modules(config, stage)) {
      ModuleFlops m{stage, spec.layer_index, spec.kind, 0, 0};
      m.dense = count_flops_module(spec, positions, config, frames);
      if (mode == ExecMode::Dense) {
        m.pruned = m.dense;
      } else {
        const GateEntry& e = gates.at(spec.kind, spec.layer_index);
        if (mode == ExecMode::Utterance && e.granularity != Granularity::Utterance) {
          throw ContractError("utterance-mode accounting needs utterance-level gates");
        }
        std::size_t kept = kept_rows(e, positions);
        // cgMLP never shortens its input: it runs on every frame unless all are pruned.
        if (spec.kind == ModuleKind::EncCgMLP && kept > 0) kept = positions;
        m.pruned = count_flops_module(spec, kept, config, frames);
      }
      s.dense += m.dense;
      s.pruned += m.pruned;
      r.modules.push_back(m);
    }
    s.fixed = stage == Stage::Encoder ? static_cast<u64>(positions) * 2 * d * d
                                      : static_cast<u64>(positions) * d * config.vocab_size;
    s.dense += s.fixed;
    s.pruned += s.fixed;

    const bool gated = stage == Stage::Encoder ? options.gate_encoder : options.gate_decoder;
    if (mode != ExecMode::Dense && gated && options.predictor == PredictorKind::Local) {
      const auto& streams = stage == Stage::Encoder ? options.encoder_streams : options.decoder_streams;
      s.gate_overhead = local_gate_cost(config.n_layers(stage), positions, streams.size(), config.context_dim);
      s.context_overhead = local_context_cost(streams, positions, config.context_dim);
    }
  }
  if (mode != ExecMode::Dense && options.predictor == PredictorKind::Global && frames > 0) {
    const u64 m = kModulesPerLayer * (config.n_enc_layers + config.n_dec_layers);
    r.encoder.gate_overhead = (d + config.context_embed_dim) * config.global_hidden + config.global_hidden * 2 * m;
  }
  return r;
}

std::string FlopsReport::to_json() const {
  nlohmann::json mods = nlohmann::json::array();
  for (const auto& m : modules) {
    mods.push_back({{"stage", to_string(m.stage)},
                    {"layer", m.layer},
                    {"module_kind", to_string(m.kind)},
                    {"dense_macs", m.dense},
                    {"pruned_macs", m.pruned}});
  }
  nlohmann::json j{{"schema_version", kSchemaVersion},
                   {"convention", "multiply-accumulates of matrix products; GFLOPs = 2*MACs/1e9; softmax, "
                                  "normalization and activation costs excluded; frontend reported separately"},
                   {"mode", to_string(mode)},
                   {"utterances", utterances},
                   {"frontend_macs", frontend},
                   {"encoder", stage_json(encoder)},
                   {"decoder", stage_json(decoder)},
                   {"total",
                    {{"dense_macs", dense_total()},
                     {"pruned_macs", pruned_total()},
                     {"gate_overhead_macs", gate_overhead()},
                     {"context_overhead_macs", context_overhead()},
                     {"reduction_macs", reduction()}}},
                   {"modules", mods}};
  return j.dump(2);
}

FlopsReport FlopsReport::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  if (j.at("schema_version").get<int>() != kSchemaVersion) {
    throw FormatError("unsupported FLOPs report schema " + j.at("schema_version").dump());
  }
  FlopsReport r;
  r.mode = exec_mode_from_string(j.at("mode").get<std::string>());
  r.utterances = j.at("utterances").get<std::size_t>();
  r.frontend = j.at("frontend_macs").get<u64>();
  r.encoder = stage_from_json(j.at("encoder"));
  r.decoder = stage_from_json(j.at("decoder"));
  for (const auto& m : j.at("modules")) {
    r.modules.push_back({stage_from_string(m.at("stage").get<std::string>()), m.at("layer").get<std::size_t>(),
                         module_kind_from_string(m.at("module_kind").get<std::string>()), m.at("dense_macs").get<u64>(),
                         m.at("pruned_macs").get<u64>()});
  }
  return r;
}

}  // namespace ctxprune

#include "ctxprune/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "ctxprune/dataset.hpp"
#include "ctxprune/errors.hpp"

namespace ctxprune {

namespace {

using Key = std::pair<std::size_t, std::size_t>;  // (utterance, position)

struct Tally {
  std::size_t kept_speech = 0, speech = 0, kept_silence = 0, silence = 0;

  VadScore finish(std::size_t layer, std::optional<ModuleKind> kind) const {
    VadScore s;
    s.layer = layer;
    s.kind = kind;
    s.n_speech = speech;
    s.n_silence = silence;
    s.speech_rate = speech ? static_cast<double>(kept_speech) / static_cast<double>(speech) : 0.0;
    s.silence_rate = silence ? static_cast<double>(kept_silence) / static_cast<double>(silence) : 0.0;
    return s;
  }
};

double mean_or_nan(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

GroupComparison compare(const std::string& scope, const std::vector<double>& with, const std::vector<double>& without) {
  GroupComparison g;
  g.scope = scope;
  g.n_with_space = with.size();
  g.n_without_space = without.size();
  g.mean_with_space = mean_or_nan(with);
  g.mean_without_space = mean_or_nan(without);
  if (with.empty() || without.empty()) {
    g.mann_whitney = not_applicable("mann_whitney_u", with.size(), without.size());
  } else {
    g.mann_whitney = mann_whitney_u(with, without);
  }
  try {
    g.welch = welch_t(with, without);
  } catch (const ParameterError&) {
    g.welch = not_applicable("welch_t", with.size(), without.size());
  }
  return g;
}

nlohmann::json test_json(const StatTestResult& r) {
  nlohmann::json j{{"test", r.test}, {"n_a", r.n_a}, {"n_b", r.n_b}, {"method", r.method}, {"applicable", r.applicable}};
  if (r.applicable) {
    j["statistic"] = r.statistic;
    j["p_value"] = format_p_value(r.p_value);
    if (std::isfinite(r.df)) j["df"] = r.df;
  }
  return j;
}

nlohmann::json group_json(const GroupComparison& g) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  return {{"scope", g.scope},
          {"with_space", {{"count", g.n_with_space}, {"mean_keep_rate", num(g.mean_with_space)}}},
          {"without_space", {{"count", g.n_without_space}, {"mean_keep_rate", num(g.mean_without_space)}}},
          {"mann_whitney_u", test_json(g.mann_whitney)},
          {"welch_t", test_json(g.welch)}};
}

std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

}  // namespace

std::vector<VadScore> vad_likeness(const GateDump& gates, const std::vector<LabelRow>& labels) {
  std::map<Key, std::uint8_t> label_of;
  for (const auto& l : labels) label_of[{l.utterance, l.position}] = l.label;
  std::map<std::size_t, Tally> per_layer;
  std::map<std::pair<std::size_t, ModuleKind>, Tally> per_module;
  for (const auto& r : gates.rows) {
    if (r.stage != Stage::Encoder) continue;
    const auto it = label_of.find({r.utterance, r.position});
    if (it == label_of.end()) {
      throw ContractError("no frame label for utterance " + std::to_string(r.utterance) + " frame " +
                          std::to_string(r.position));
    }
    for (Tally* t : {&per_layer[r.layer], &per_module[{r.layer, r.kind}]}) {
      if (it->second) {
        ++t->speech;
        t->kept_speech += r.decision;
      } else {
        ++t->silence;
        t->kept_silence += r.decision;
      }
    }
  }
  std::vector<VadScore> out;
  for (const auto& [layer, t] : per_layer) out.push_back(t.finish(layer, std::nullopt));
  for (const auto& [key, t] : per_module) out.push_back(t.finish(key.first, key.second));
  return out;
}

double mean_vad(const std::vector<VadScore>& scores, std::size_t first_layer) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& s : scores) {
    if (s.kind || s.layer < first_layer) continue;
    sum += s.score();
    ++n;
  }
  if (n == 0) throw ContractError("no encoder layers at or above index " + std::to_string(first_layer));
  return sum / static_cast<double>(n);
}

std::vector<double> layer_keep_rates(const GateDump& gates, Stage stage) {
  std::vector<std::size_t> kept, total;
  for (const auto& r : gates.rows) {
    if (r.stage != stage) continue;
    if (r.layer >= total.size()) {
      kept.resize(r.layer + 1, 0);
      total.resize(r.layer + 1, 0);
    }
    kept[r.layer] += r.decision;
    ++total[r.layer];
  }
  std::vector<double> out(total.size(), 0.0);
  for (std::size_t l = 0; l < total.size(); ++l) {
    out[l] = total[l] ? static_cast<double>(kept[l]) / static_cast<double>(total[l]) : 0.0;
  }
  return out;
}

double TokenGateRecord::src_keep_rate() const {
  if (src_decisions.empty()) return 0.0;
  return static_cast<double>(std::accumulate(src_decisions.begin(), src_decisions.end(), 0)) /
         static_cast<double>(src_decisions.size());
}

std::vector<TokenGateRecord> token_records(const GateDump& gates, const std::vector<TokenRow>& tokens) {
  std::map<Key, std::map<std::size_t, std::uint8_t>> src;
  for (const auto& r : gates.rows) {
    if (r.kind == ModuleKind::DecSrcAttn) src[{r.utterance, r.position}][r.layer] = r.decision;
  }
  std::vector<TokenGateRecord> out;
  for (const auto& t : tokens) {
    if (t.token_id < vocab::kFirstWordStart) continue;
    const auto it = src.find({t.utterance, t.position});
    if (it == src.end()) {
      throw ContractError("no source-attention gates for utterance " + std::to_string(t.utterance) + " token " +
                          std::to_string(t.position));
    }
    TokenGateRecord rec{t.utterance, t.position, t.token_id, t.surface, t.starts_word, {}};
    for (const auto& [layer, d] : it->second) rec.src_decisions.push_back(d);
    out.push_back(std::move(rec));
  }
  return out;
}

TokenStatsReport src_attention_token_stats(const std::vector<TokenGateRecord>& records) {
  TokenStatsReport report;
  std::vector<double> with, without;
  std::size_t layers = 0;
  for (const auto& r : records) {
    (r.starts_word ? with : without).push_back(r.src_keep_rate());
    layers = std::max(layers, r.src_decisions.size());
  }
  report.pooled = compare("pooled", with, without);
  for (std::size_t l = 0; l < layers; ++l) {
    std::vector<double> lw, lo;
    for (const auto& r : records) {
      if (l >= r.src_decisions.size()) continue;
      (r.starts_word ? lw : lo).push_back(r.src_decisions[l]);
    }
    report.per_layer.push_back(compare("layer" + std::to_string(l), lw, lo));
  }
  return report;
}

std::string TokenStatsReport::to_json() const {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& g : per_layer) layers.push_back(group_json(g));
  nlohmann::json j{{"schema_version", 1},
                   {"measure", "source-attention keep rate per token"},
                   {"pooled", group_json(pooled)},
                   {"per_layer", layers}};
  return j.dump(2);
}

std::string vad_json(const std::vector<VadScore>& scores, const std::vector<double>& layer_rates) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& s : scores) {
    rows.push_back({{"layer", s.layer},
                    {"module_kind", s.kind ? std::string(to_string(*s.kind)) : std::string("all")},
                    {"speech_keep_rate", s.speech_rate},
                    {"silence_keep_rate", s.silence_rate},
                    {"speech_frames", s.n_speech},
                    {"silence_frames", s.n_silence},
                    {"vad_likeness", s.score()}});
  }
  double all = 0.0;
  for (double r : layer_rates) all += r;
  nlohmann::json j{{"schema_version", 1},
                   {"scores", rows},
                   {"layer_keep_rates", layer_rates},
                   {"mean_keep_rate", layer_rates.empty() ? 0.0 : all / static_cast<double>(layer_rates.size())}};
  if (layer_rates.size() > 1) j["mean_vad_likeness_from_layer1"] = mean_vad(scores, 1);
  return j.dump(2);
}

std::string render_heatmap(const GateDump& gates, const std::vector<LabelRow>& labels, std::size_t utterance,
                           ModuleKind kind) {
  std::map<std::size_t, double> energy;
  for (const auto& l : labels)
    if (l.utterance == utterance) energy[l.position] = l.energy;
  std::map<std::pair<std::size_t, std::size_t>, std::uint8_t> cell;  // (layer, frame)
  std::size_t layers = 0, frames = energy.size();
  for (const auto& r : gates.rows) {
    if (r.utterance != utterance || r.kind != kind) continue;
    cell[{r.layer, r.position}] = r.decision;
    layers = std::max(layers, r.layer + 1);
    frames = std::max(frames, r.position + 1);
  }
  if (layers == 0) {
    throw ContractError("no " + std::string(to_string(kind)) + " gates for utterance " + std::to_string(utterance));
  }
  double peak = 0.0;
  for (const auto& [_, e] : energy) peak = std::max(peak, e);

  constexpr int kCell = 12, kMargin = 40, kTop = 60, kGap = 10;
  const int width = kMargin + static_cast<int>(frames) * kCell + 10;
  const int mask_y = kMargin / 2 + kTop + kGap;
  const int height = mask_y + static_cast<int>(layers) * kCell + 20;

  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<!-- ctxprune-heatmap v1 utterance=" << utterance << " module=" << to_string(kind) << " -->\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<g id=\"energy\" data-frames=\"" << frames << "\">\n";
  for (std::size_t t = 0; t < frames; ++t) {
    const double e = energy.count(t) ? energy[t] : 0.0;
    const double h = peak > 0.0 ? kTop * e / peak : 0.0;
    svg << "<rect x=\"" << kMargin + static_cast<int>(t) * kCell << "\" y=\"" << fixed2(kMargin / 2 + kTop - h)
        << "\" width=\"" << kCell - 1 << "\" height=\"" << fixed2(h) << "\" fill=\"#4c72b0\"/>\n";
  }
  svg << "</g>\n<g id=\"mask\" data-layers=\"" << layers << "\" data-frames=\"" << frames << "\">\n";
  for (std::size_t l = 0; l < layers; ++l) {
    // Layer 0 at the bottom, as in a spectrogram-style plot.
    const int y = mask_y + static_cast<int>(layers - 1 - l) * kCell;
    svg << "<text x=\"4\" y=\"" << y + kCell - 2 << "\" font-size=\"10\">L" << l << "</text>\n";
    for (std::size_t t = 0; t < frames; ++t) {
      const auto it = cell.find({l, t});
      const bool kept = it != cell.end() && it->second;
      svg << "<rect x=\"" << kMargin + static_cast<int>(t) * kCell << "\" y=\"" << y << "\" width=\"" << kCell - 1
          << "\" height=\"" << kCell - 1 << "\" fill=\"" << (kept ? "#ff7f0e" : "#e0e0e0") << "\"/>\n";
    }
  }
  svg << "</g>\n</svg>\n";
  return svg.str();
}

}  // namespace ctxprune

#include <doctest.h>

#include <cmath>

#include "ctxprune/analysis.hpp"
#include "ctxprune/errors.hpp"

using namespace ctxprune;

namespace {

GateRow enc(std::size_t utt, std::size_t layer, ModuleKind kind, std::size_t pos, std::uint8_t d) {
  return {utt, Stage::Encoder, layer, kind, pos, d ? 0.9 : 0.1, d};
}

GateRow src(std::size_t utt, std::size_t layer, std::size_t pos, std::uint8_t d) {
  return {utt, Stage::Decoder, layer, ModuleKind::DecSrcAttn, pos, d ? 0.9 : 0.1, d};
}

// Two frames of speech (0, 1) and two of silence (2, 3). Layer 0 keeps all;
// layer 1 keeps speech only in self-attention and everything in FFN.
GateDump vad_dump() {
  GateDump d;
  for (std::size_t t = 0; t < 4; ++t) {
    d.rows.push_back(enc(0, 0, ModuleKind::EncSelfAttn, t, 1));
    d.rows.push_back(enc(0, 0, ModuleKind::EncFFN, t, 1));
    d.rows.push_back(enc(0, 1, ModuleKind::EncSelfAttn, t, t < 2));
    d.rows.push_back(enc(0, 1, ModuleKind::EncFFN, t, 1));
  }
  return d;
}

std::vector<LabelRow> vad_labels() {
  return {{0, 0, 1, 2.0}, {0, 1, 1, 2.5}, {0, 2, 0, 0.1}, {0, 3, 0, 0.2}};
}

}  // namespace

TEST_CASE("vad likeness by hand") {
  const auto scores = vad_likeness(vad_dump(), vad_labels());
  // Two pooled rows, then four (layer, module) rows.
  REQUIRE(scores.size() == 6);
  CHECK_FALSE(scores[0].kind.has_value());
  CHECK(scores[0].score() == 0.0);
  CHECK(scores[1].layer == 1);
  CHECK(scores[1].speech_rate == 1.0);
  CHECK(scores[1].silence_rate == 0.5);
  CHECK(scores[1].n_speech == 4);
  CHECK(mean_vad(scores, 0) == doctest::Approx(0.25));
  CHECK(mean_vad(scores, 1) == doctest::Approx(0.5));
  CHECK_THROWS_AS(mean_vad(scores, 2), ContractError);
  bool found = false;
  for (const auto& s : scores) {
    if (s.kind == ModuleKind::EncSelfAttn && s.layer == 1) {
      CHECK(s.score() == 1.0);
      found = true;
    }
  }
  CHECK(found);
}

TEST_CASE("missing labels are a contract error") {
  auto labels = vad_labels();
  labels.pop_back();
  CHECK_THROWS_AS(vad_likeness(vad_dump(), labels), ContractError);
}

TEST_CASE("layer keep rates") {
  const auto rates = layer_keep_rates(vad_dump(), Stage::Encoder);
  REQUIRE(rates.size() == 2);
  CHECK(rates[0] == 1.0);
  CHECK(rates[1] == doctest::Approx(0.75));
}

TEST_CASE("token records join decoder gates and skip special tokens") {
  GateDump d;
  // Decoder positions: 0 = language tag input, 1..3 targets, 4 = <eos>.
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t p = 0; p < 5; ++p) d.rows.push_back(src(0, l, p, (p + l) % 2));
  const std::vector<TokenRow> tokens{{0, 0, 2, "<lang0>", false},
                                     {0, 1, 5, " a", true},
                                     {0, 2, 20, "b", false},
                                     {0, 3, 6, " c", true},
                                     {0, 4, 1, "<eos>", false}};
  const auto recs = token_records(d, tokens);
  REQUIRE(recs.size() == 3);
  CHECK(recs[0].token_id == 5);
  CHECK(recs[0].starts_word);
  CHECK(recs[0].src_decisions == std::vector<std::uint8_t>{1, 0});
  CHECK(recs[0].src_keep_rate() == 0.5);

  std::vector<TokenRow> extra = tokens;
  extra.push_back({0, 9, 7, " d", true});
  CHECK_THROWS_AS(token_records(d, extra), ContractError);
}

TEST_CASE("token statistics mark tests that cannot run") {
  std::vector<TokenGateRecord> recs;
  for (std::size_t i = 0; i < 6; ++i) {
    TokenGateRecord r;
    r.position = i;
    r.starts_word = i % 2 == 0;
    r.src_decisions = {static_cast<std::uint8_t>(i != 1), 1};
    recs.push_back(r);
  }
  const auto rep = src_attention_token_stats(recs);
  CHECK(rep.pooled.n_with_space == 3);
  CHECK(rep.pooled.mean_with_space == 1.0);
  CHECK(rep.pooled.mean_without_space == doctest::Approx(2.5 / 3.0));
  CHECK(rep.per_layer.size() == 2);
  // Layer 1 is constant in both groups: Welch cannot run.
  CHECK_FALSE(rep.per_layer[1].welch.applicable);
  CHECK(rep.pooled.welch.applicable);

  std::vector<TokenGateRecord> one_sided(recs.begin(), recs.begin() + 1);
  const auto r2 = src_attention_token_stats(one_sided);
  CHECK_FALSE(r2.pooled.mann_whitney.applicable);
  CHECK(r2.to_json().find("\"applicable\": false") != std::string::npos);
}

TEST_CASE("heatmap svg") {
  const std::string svg = render_heatmap(vad_dump(), vad_labels(), 0, ModuleKind::EncSelfAttn);
  CHECK(svg.find("<svg") != std::string::npos);
  CHECK(svg.find("</svg>") != std::string::npos);
  CHECK(svg == render_heatmap(vad_dump(), vad_labels(), 0, ModuleKind::EncSelfAttn));
  CHECK_THROWS_AS(render_heatmap(vad_dump(), vad_labels(), 3, ModuleKind::EncSelfAttn), ContractError);
}

TEST_CASE("vad json lists layers") {
  const auto scores = vad_likeness(vad_dump(), vad_labels());
  const std::string j = vad_json(scores, layer_keep_rates(vad_dump(), Stage::Encoder));
  CHECK(j.find("speech_keep_rate") != std::string::npos);
}

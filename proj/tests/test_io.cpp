#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "ctxprune/checkpoint.hpp"
#include "ctxprune/dumps.hpp"
#include "ctxprune/errors.hpp"
#include "oracles.hpp"

using namespace ctxprune;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "ctxprune_unit" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ModelConfig tiny() {
  ModelConfig c;
  c.n_enc_layers = 2;
  c.n_dec_layers = 1;
  return c;
}

}  // namespace

TEST_CASE("gate dump round trip") {
  GateSet set = GateSet::uniform(tiny(), 4, 2, Granularity::Position, true);
  GateEntry e = set.at(ModuleKind::EncCgMLP, 1);
  e.probability = {0.1, 0.123456789012345678, 0.9, 0.5};
  e.decision = {0, 0, 1, 1};
  set.put(e);
  GateDump dump;
  dump.mode = "temporal";
  dump.context = "front+spk";
  dump.append(set, 0);
  dump.append(GateSet::uniform(tiny(), 3, 2, Granularity::Position, false), 1);

  std::stringstream ss;
  write_gate_dump(ss, dump);
  CHECK(ss.str().rfind("# ctxprune-gates v1 mode=temporal context=front+spk\n", 0) == 0);
  const GateDump back = read_gate_dump(ss);
  CHECK(back.mode == "temporal");
  CHECK(back.context == "front+spk");
  REQUIRE(back.rows.size() == dump.rows.size());
  for (std::size_t i = 0; i < back.rows.size(); ++i) {
    CHECK(back.rows[i].probability == dump.rows[i].probability);
    CHECK(back.rows[i].decision == dump.rows[i].decision);
    CHECK(back.rows[i].kind == dump.rows[i].kind);
  }

  const auto sets = to_gate_sets(back, false);
  REQUIRE(sets.size() == 2);
  CHECK(sets[0].second.length(Stage::Encoder) == 4);
  CHECK(sets[1].second.length(Stage::Encoder) == 3);
  CHECK(sets[0].second.at(ModuleKind::EncCgMLP, 1).decision == e.decision);
  CHECK(sets[1].second.decision_rate() == 0.0);
}

TEST_CASE("utterance gates are written per position and read back once") {
  GateSet set = GateSet::uniform(tiny(), 5, 2, Granularity::Utterance, true);
  GateEntry e = set.at(ModuleKind::EncFFN, 0);
  e.decision = {0};
  set.put(e);
  GateDump dump;
  dump.mode = "utterance";
  dump.append(set, 7);
  std::size_t ffn_rows = 0;
  for (const auto& r : dump.rows) ffn_rows += r.kind == ModuleKind::EncFFN && r.layer == 0;
  CHECK(ffn_rows == 5);
  const auto sets = to_gate_sets(dump, true);
  REQUIRE(sets.size() == 1);
  CHECK(sets[0].first == 7);
  const auto& back = sets[0].second.at(ModuleKind::EncFFN, 0);
  CHECK(back.granularity == Granularity::Utterance);
  CHECK(back.decision == std::vector<std::uint8_t>{0});
}

TEST_CASE("gate dumps with gaps are rejected") {
  GateDump dump;
  dump.rows.push_back({0, Stage::Encoder, 0, ModuleKind::EncFFN, 0, 1.0, 1});
  dump.rows.push_back({0, Stage::Encoder, 0, ModuleKind::EncFFN, 2, 1.0, 1});
  CHECK_THROWS_AS(to_gate_sets(dump, false), FormatError);
}

TEST_CASE("malformed dumps") {
  std::stringstream bad_magic("# something v1\n");
  CHECK_THROWS_AS(read_gate_dump(bad_magic), FormatError);
  std::stringstream bad_version("# ctxprune-gates v9 mode=temporal context=front\n");
  CHECK_THROWS_AS(read_gate_dump(bad_version), FormatError);
  std::stringstream bad_decision(
      "# ctxprune-gates v1 mode=temporal context=front\n"
      "utterance,stage,layer,module_kind,position,probability,decision\n"
      "0,enc,0,enc_ffn,0,0.5,2\n");
  CHECK_THROWS_AS(read_gate_dump(bad_decision), FormatError);
  std::stringstream short_row(
      "# ctxprune-labels v1\n"
      "utterance,position,label,energy\n"
      "0,1,1\n");
  CHECK_THROWS_AS(read_label_dump(short_row), FormatError);
  CHECK_THROWS_AS(read_gate_dump(fs::path("/nonexistent/gates.csv")), FormatError);
}

TEST_CASE("label and token dumps round trip") {
  const std::vector<LabelRow> labels{{0, 0, 1, 0.25}, {0, 1, 0, 1e-7}};
  std::stringstream ls;
  write_label_dump(ls, labels);
  const auto lb = read_label_dump(ls);
  REQUIRE(lb.size() == 2);
  CHECK(lb[1].energy == 1e-7);
  CHECK(lb[0].label == 1);

  const std::vector<TokenRow> tokens{{0, 0, 5, " ab", true}, {0, 1, 20, "c,d", false}};
  std::stringstream ts;
  write_token_dump(ts, tokens);
  const auto tb = read_token_dump(ts);
  REQUIRE(tb.size() == 2);
  CHECK(tb[0].surface == " ab");
  CHECK(tb[0].starts_word);
  CHECK(tb[1].surface == "c,d");
}

TEST_CASE("double formatting round trips") {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, 123456789.125, -0.0}) CHECK(std::stod(format_double(v)) == v);
}

TEST_CASE("checkpoint round trip and mismatch") {
  const fs::path dir = scratch("ckpt");
  RngState rng(1);
  ParamStore a;
  a.add("w", oracle::random_tensor({3, 4}, rng, 1.0, true));
  a.add("b", oracle::random_tensor({1, 4}, rng, 1.0, true));
  save_checkpoint(dir / "a.ckpt", a);

  ParamStore b;
  b.add("w", Tensor::zeros({3, 4}, true));
  b.add("b", Tensor::zeros({1, 4}, true));
  load_checkpoint(dir / "a.ckpt", b);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto x = a.entries()[i].second.data(), y = b.entries()[i].second.data();
    CHECK(std::equal(x.begin(), x.end(), y.begin()));
  }

  ParamStore wrong_shape;
  wrong_shape.add("w", Tensor::zeros({4, 3}, true));
  wrong_shape.add("b", Tensor::zeros({1, 4}, true));
  CHECK_THROWS_AS(load_checkpoint(dir / "a.ckpt", wrong_shape), FormatError);

  ParamStore missing;
  missing.add("w", Tensor::zeros({3, 4}, true));
  CHECK_THROWS_AS(load_checkpoint(dir / "a.ckpt", missing), FormatError);

  std::ofstream(dir / "junk.ckpt", std::ios::binary) << "CTXP";
  CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt", b), FormatError);
}

#include <doctest.h>

#include "ctxprune/errors.hpp"
#include "ctxprune/gates.hpp"
#include "ctxprune/model.hpp"
#include "oracles.hpp"

using namespace ctxprune;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.context_dim = 16;
  c.n_heads = 2;
  c.d_ffn = 24;
  c.n_enc_layers = 2;
  c.n_dec_layers = 2;
  return c;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  c.n_heads = 5;
  CHECK_THROWS_AS(c.validate(), ParameterError);
  c = {};
  c.cgmlp_kernel = 4;
  CHECK_THROWS_AS(c.validate(), ParameterError);
  c = {};
  c.context_dim = 32;
  CHECK_THROWS_AS(c.validate(), ParameterError);
  c = {};
  c.target_keep_ratio = 0.0;
  CHECK_THROWS_AS(c.validate(), ParameterError);
}

TEST_CASE("config json round trip") {
  ModelConfig c = small_config();
  c.gate_keep_bias = 1.25;
  c.scaled_gate_attention = true;
  const ModelConfig back = ModelConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.d_model == 16);
  CHECK(back.scaled_gate_attention);
}

TEST_CASE("module enumeration is layer-major in slot order") {
  ModelConfig c = small_config();
  c.n_enc_layers = 3;
  const auto enc = prunable_modules(c, Stage::Encoder);
  REQUIRE(enc.size() == 9);
  CHECK(enc[0].kind == ModuleKind::EncSelfAttn);
  CHECK(enc[1].kind == ModuleKind::EncCgMLP);
  CHECK(enc[2].kind == ModuleKind::EncFFN);
  CHECK(enc[4].layer_index == 1);
  CHECK(enc[4].module_index_in_layer == 1);
  const auto dec = prunable_modules(c, Stage::Decoder);
  REQUIRE(dec.size() == 6);
  CHECK(dec[1].kind == ModuleKind::DecSrcAttn);
  for (auto k : kDecoderKinds) CHECK(stage_of(k) == Stage::Decoder);
  CHECK(module_kind_from_string(to_string(ModuleKind::DecSrcAttn)) == ModuleKind::DecSrcAttn);
  CHECK(exec_mode_from_string("utterance") == ExecMode::Utterance);
}

TEST_CASE("forward shapes") {
  const ModelConfig c = small_config();
  ParamStore store;
  ToyModel model(c, store, RngState(1));
  RngState rng(2);
  const Tensor x = oracle::random_tensor({9, c.feature_dim}, rng);
  NoGradGuard g;
  const auto enc = model.encode(x, ExecMode::Dense, nullptr);
  CHECK(enc.boundaries.size() == c.n_enc_layers + 1);
  CHECK(enc.output.shape() == Shape{9, c.d_model});
  const std::vector<int> ids{2, 7, 9};
  CHECK(model.decode(ids, enc.output, ExecMode::Dense, nullptr).shape() == Shape{3, c.vocab_size});
}

TEST_CASE("decoder is causal") {
  const ModelConfig c = small_config();
  ParamStore store;
  ToyModel model(c, store, RngState(1));
  RngState rng(3);
  NoGradGuard g;
  const auto enc = model.encode(oracle::random_tensor({6, c.feature_dim}, rng), ExecMode::Dense, nullptr);
  const Tensor a = model.decode(std::vector<int>{2, 7, 9, 11}, enc.output, ExecMode::Dense, nullptr);
  const Tensor b = model.decode(std::vector<int>{2, 7, 20, 30}, enc.output, ExecMode::Dense, nullptr);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t v = 0; v < c.vocab_size; ++v) CHECK(a.at(r, v) == b.at(r, v));
  bool differs = false;
  for (std::size_t v = 0; v < c.vocab_size; ++v) differs = differs || a.at(3, v) != b.at(3, v);
  CHECK(differs);
}

TEST_CASE("pruning every module leaves the residual path") {
  const ModelConfig c = small_config();
  ParamStore store;
  ToyModel model(c, store, RngState(4));
  RngState rng(5);
  const Tensor x = oracle::random_tensor({5, c.feature_dim}, rng);
  NoGradGuard g;
  const GateSet none = GateSet::uniform(c, 5, 2, Granularity::Utterance, false);
  ExecStats stats;
  const auto enc = encoder_forward(model, x, none, ExecMode::Utterance, &stats);
  CHECK(stats.executed_count() == 0);
  // Layer boundaries stay equal to the frontend output.
  const Tensor front = model.frontend(x);
  for (const auto& b : enc.boundaries)
    for (std::size_t i = 0; i < b.numel(); ++i) CHECK(b[i] == front[i]);
}

TEST_CASE("same seed gives the same parameters") {
  const ModelConfig c = small_config();
  ParamStore s1, s2;
  ToyModel m1(c, s1, RngState(9)), m2(c, s2, RngState(9));
  REQUIRE(s1.size() == s2.size());
  for (std::size_t i = 0; i < s1.size(); ++i) {
    CHECK(s1.entries()[i].first == s2.entries()[i].first);
    const auto a = s1.entries()[i].second.data(), b = s2.entries()[i].second.data();
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
  }
}

TEST_CASE("duplicate parameter names are rejected") {
  ParamStore store;
  store.add("w", Tensor::zeros({2, 2}, true));
  CHECK_THROWS(store.add("w", Tensor::zeros({2, 2}, true)));
  CHECK(store.total_values() == 4);
}

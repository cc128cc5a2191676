#include <doctest.h>

#include <cmath>

#include "ctxprune/dataset.hpp"
#include "ctxprune/errors.hpp"
#include "ctxprune/gates.hpp"
#include "ctxprune/ops.hpp"
#include "oracles.hpp"

using namespace ctxprune;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.context_dim = 16;
  c.n_heads = 2;
  c.d_ffn = 24;
  c.n_enc_layers = 3;
  c.n_dec_layers = 2;
  return c;
}

SyntheticUtterance one_utterance(std::uint64_t seed = 1) { return generate_dataset(TaskSpec{}, 1, seed)[0]; }

}  // namespace

TEST_CASE("inference threshold keeps ties") {
  const std::vector<double> p{0.49, 0.5, 0.51, 1.0, 0.0};
  const auto d = binarize_inference(p, 0.5);
  CHECK(d == std::vector<std::uint8_t>{0, 1, 1, 1, 0});
}

TEST_CASE("gate set lookup and rates") {
  const ModelConfig c = small_config();
  GateSet set = GateSet::uniform(c, 10, 4, Granularity::Position, true);
  CHECK(set.entries().size() == 3 * 3 + 3 * 2);
  CHECK(set.decision_rate() == 1.0);
  CHECK(set.length(Stage::Encoder) == 10);
  CHECK_THROWS_AS(set.at(ModuleKind::EncFFN, 7), ContractError);
  CHECK(set.find(ModuleKind::EncFFN, 7) == nullptr);

  GateEntry e = set.at(ModuleKind::EncFFN, 1);
  for (std::size_t t = 0; t < 5; ++t) e.decision[t] = 0;
  set.put(e);
  CHECK(set.entries().size() == 15);
  CHECK(set.decision_rate(Stage::Encoder) == doctest::Approx(1.0 - 5.0 / 90.0));
  CHECK(set.decision_rate(Stage::Decoder) == 1.0);

  // Utterance slots count once per position.
  GateSet utt = GateSet::uniform(c, 10, 4, Granularity::Utterance, true);
  GateEntry u = utt.at(ModuleKind::EncSelfAttn, 0);
  u.decision[0] = 0;
  u.probability[0] = 0.0;
  utt.put(u);
  CHECK(utt.decision_rate(Stage::Encoder) == doctest::Approx(8.0 / 9.0));
  CHECK(utt.mean_probability(Stage::Encoder) == doctest::Approx(8.0 / 9.0));
}

TEST_CASE("local predictor state grows by one entry per layer") {
  const ModelConfig c = small_config();
  const ContextConfig ctx = ContextConfig::parse("front+spk+event");
  const ProviderConfig provider;
  ParamStore store;
  RngState rng(3);
  ToyModel model(c, store, rng.split(0));
  LocalGatePredictor pred(store, "g", c, Stage::Encoder, ctx, stream_dims(ctx, provider, c.d_model), rng);
  const auto utt = one_utterance();
  LocalGater gater(&pred, nullptr, build_bundle(SyntheticContextProvider(provider), ctx, utt), {}, ExecMode::Temporal,
                   GateSampling{}, RngState(4), {true, false});
  NoGradGuard g;
  model.encode(utt.features, ExecMode::Temporal, &gater);
  CHECK(gater.state(Stage::Encoder).count() == 3 + c.n_enc_layers);
  CHECK(gater.state(Stage::Encoder).positions() == utt.frames());
  const GateEntry& e = gater.gates().at(ModuleKind::EncCgMLP, 2);
  CHECK(e.decision.size() == utt.frames());
  for (std::size_t t = 0; t < e.decision.size(); ++t) CHECK(e.decision[t] == (e.probability[t] >= 0.5 ? 1 : 0));
}

TEST_CASE("fresh local predictor keeps almost everything") {
  // The keep bias starts every gate near sigmoid(2.2).
  const ModelConfig c = small_config();
  const ContextConfig ctx = ContextConfig::parse("front");
  ParamStore store;
  RngState rng(8);
  ToyModel model(c, store, rng.split(0));
  LocalGatePredictor pred(store, "g", c, Stage::Encoder, ctx, stream_dims(ctx, ProviderConfig{}, c.d_model), rng);
  const auto utt = one_utterance(2);
  LocalGater gater(&pred, nullptr, {}, {}, ExecMode::Temporal, GateSampling{}, RngState(1), {true, false});
  NoGradGuard g;
  model.encode(utt.features, ExecMode::Temporal, &gater);
  CHECK(gater.gates().mean_probability(Stage::Encoder) > 0.6);
}

TEST_CASE("utterance mode pools to one decision per module") {
  const ModelConfig c = small_config();
  const ContextConfig ctx = ContextConfig::parse("front+spk");
  const ProviderConfig provider;
  ParamStore store;
  RngState rng(5);
  ToyModel model(c, store, rng.split(0));
  LocalGatePredictor pred(store, "g", c, Stage::Encoder, ctx, stream_dims(ctx, provider, c.d_model), rng);
  const auto utt = one_utterance(3);
  LocalGater gater(&pred, nullptr, build_bundle(SyntheticContextProvider(provider), ctx, utt), {}, ExecMode::Utterance,
                   GateSampling{}, RngState(6), {true, false});
  NoGradGuard g;
  model.encode(utt.features, ExecMode::Utterance, &gater);
  for (const auto& e : gater.gates().entries()) {
    CHECK(e.granularity == Granularity::Utterance);
    CHECK(e.decision.size() == 1);
  }
}

TEST_CASE("training masks are hard and carry gradient to the predictor") {
  const ModelConfig c = small_config();
  const ContextConfig ctx = ContextConfig::parse("front");
  ParamStore store;
  RngState rng(7);
  ToyModel model(c, store, rng.split(0));
  LocalGatePredictor pred(store, "g", c, Stage::Encoder, ctx, stream_dims(ctx, ProviderConfig{}, c.d_model), rng);
  const auto utt = one_utterance(4);
  GateSampling s;
  s.training = true;
  LocalGater gater(&pred, nullptr, {}, {}, ExecMode::Temporal, s, RngState(9), {true, false});
  const auto enc = model.encode(utt.features, ExecMode::Temporal, &gater);
  for (const auto& e : gater.gates().entries()) {
    for (std::size_t i = 0; i < e.mask.numel(); ++i) CHECK((e.mask[i] == 0.0 || e.mask[i] == 1.0));
  }
  store.zero_grad();
  backward(sum(square(enc.output)));
  double g = 0.0;
  for (const auto& [name, t] : store.entries()) {
    if (name.rfind("g.", 0) != 0 || !t.has_grad()) continue;
    for (double v : t.grad()) g += std::abs(v);
  }
  CHECK(g > 0.0);
}

TEST_CASE("global predictor emits one utterance gate for every module") {
  const ModelConfig c = small_config();
  ParamStore store;
  RngState rng(10);
  GlobalGatePredictor pred(store, "gg", c, rng);
  CHECK(pred.module_count() == 3 * (c.n_enc_layers + c.n_dec_layers));
  RngState r(1);
  const Tensor pooled = oracle::random_tensor({1, c.d_model}, r);
  NoGradGuard g;
  const GateSet set = global_gate_forward(pred, pooled, 1, r, GateSampling{}, c, 12, 5);
  CHECK(set.entries().size() == pred.module_count());
  for (const auto& e : set.entries()) CHECK(e.decision.size() == 1);
  CHECK(set.length(Stage::Encoder) == 12);
  CHECK(pred.logits(pooled, 0).shape() == Shape{pred.module_count(), 2});
  CHECK_THROWS(pred.logits(pooled, static_cast<int>(c.n_context_ids)));
}

TEST_CASE("global gates broadcast per frame in temporal mode") {
  const ModelConfig c = small_config();
  ParamStore store;
  RngState rng(11);
  ToyModel model(c, store, rng.split(0));
  GlobalGatePredictor pred(store, "gg", c, rng);
  const auto utt = one_utterance(5);
  GlobalGater gater(&pred, c, 0, ExecMode::Temporal, GateSampling{}, RngState(2), {true, false});
  NoGradGuard g;
  model.encode(utt.features, ExecMode::Temporal, &gater);
  const GateEntry& e = gater.gates().at(ModuleKind::EncSelfAttn, 1);
  CHECK(e.decision.size() >= 1);
  for (auto d : e.decision) CHECK(d == e.decision[0]);
}

TEST_CASE("fixed gater rejects a wrong length") {
  const ModelConfig c = small_config();
  ParamStore store;
  ToyModel model(c, store, RngState(1));
  const auto utt = one_utterance();
  const GateSet set = GateSet::uniform(c, utt.frames() + 1, 3, Granularity::Position, true);
  FixedGater gater(set);
  NoGradGuard g;
  CHECK_THROWS_AS(model.encode(utt.features, ExecMode::Temporal, &gater), ContractError);
}

TEST_CASE("decoder context adds lang2vec once") {
  const ContextConfig a = decoder_context(ContextConfig::parse("front+spk"));
  CHECK(a.name() == "front+spk+lang2vec");
  CHECK(decoder_context(ContextConfig::parse("lang2vec")).size() == 1);
}

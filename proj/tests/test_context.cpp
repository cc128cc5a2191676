#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "ctxprune/context.hpp"
#include "ctxprune/dataset.hpp"
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

double norm(const Tensor& t) {
  double s = 0;
  for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("context config parsing") {
  const ContextConfig c = ContextConfig::parse("front+spk+event");
  CHECK(c.size() == 3);
  CHECK(c.has(StreamKind::Speaker));
  CHECK_FALSE(c.has(StreamKind::Lang2Vec));
  CHECK(c.name() == "front+spk+event");
  CHECK(ContextConfig::parse("lang2vec").streams[0] == StreamKind::Lang2Vec);
  CHECK_THROWS_AS(ContextConfig::parse("front+voice"), ParameterError);
  CHECK_THROWS_AS(ContextConfig::parse("spk+spk"), ParameterError);
  for (const auto& name : standard_context_configs()) CHECK(ContextConfig::parse(name).name() == name);
}

TEST_CASE("length alignment repeats the last row or cuts the tail") {
  const Tensor raw = Tensor::matrix({{1, 2}, {3, 4}});
  const Tensor longer = align_length(raw, 4);
  CHECK(longer.shape() == Shape{4, 2});
  CHECK(longer.at(3, 0) == 3);
  CHECK(longer.at(3, 1) == 4);
  const Tensor shorter = align_length(raw, 1);
  CHECK(shorter.shape() == Shape{1, 2});
  CHECK(shorter.at(0, 1) == 2);
}

TEST_CASE("speaker embeddings") {
  ProviderConfig cfg;
  const Tensor a = clean_speaker_embedding(3, cfg);
  CHECK(norm(a) == doctest::Approx(1.0));
  const Tensor b = clean_speaker_embedding(3, cfg);
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  const Tensor other = clean_speaker_embedding(4, cfg);
  double dot = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) dot += a[i] * other[i];
  CHECK(std::abs(dot) < 0.99);

  const auto utt = generate_dataset(TaskSpec{}, 1, 3)[0];
  const Tensor s = make_speaker_context(utt, cfg);
  CHECK(s.shape() == Shape{1, cfg.speaker_dim});
  const Tensor clean = clean_speaker_embedding(utt.speaker_id, cfg);
  double diff = 0;
  for (std::size_t i = 0; i < s.numel(); ++i) diff = std::max(diff, std::abs(s[i] - clean[i]));
  CHECK(diff < 0.1);
}

TEST_CASE("event stream has one row per two frames") {
  ProviderConfig cfg;
  const auto utt = generate_dataset(TaskSpec{}, 1, 4)[0];
  const Tensor e = make_event_context(utt, cfg);
  CHECK(e.rows() == std::max<std::size_t>(1, utt.frames() / 2));
  CHECK(e.cols() == cfg.event_dim);
  CHECK(norm(event_basis(2, cfg)) == doctest::Approx(1.0));
}

TEST_CASE("language vectors are binary and distinct") {
  ProviderConfig cfg;
  std::vector<Tensor> v;
  for (int l = 0; l < cfg.n_languages; ++l) v.push_back(make_lang_vector(l, cfg));
  for (const auto& t : v)
    for (double x : t.data()) CHECK((x == 0.0 || x == 1.0));
  for (int i = 0; i < cfg.n_languages; ++i)
    for (int j = i + 1; j < cfg.n_languages; ++j)
      CHECK_FALSE(std::equal(v[i].data().begin(), v[i].data().end(), v[j].data().begin()));
  CHECK_THROWS_AS(make_lang_vector(cfg.n_languages, cfg), ParameterError);
}

TEST_CASE("bundles skip the front stream") {
  const auto utt = generate_dataset(TaskSpec{}, 1, 5)[0];
  const SyntheticContextProvider provider{ProviderConfig{}};
  const auto b = build_bundle(provider, ContextConfig::parse("front+spk+lang2vec"), utt);
  REQUIRE(b.size() == 2);
  CHECK(b.order() == std::vector<StreamKind>{StreamKind::Speaker, StreamKind::Lang2Vec});
}

TEST_CASE("projector output shapes") {
  ParamStore store;
  RngState rng(1);
  const ContextConfig cfg = ContextConfig::parse("spk+event");
  const ProviderConfig provider;
  ContextProjector proj(store, "ctx", cfg, {provider.speaker_dim, provider.event_dim}, 16, rng);
  const auto utt = generate_dataset(TaskSpec{}, 1, 6)[0];
  const auto bundle = build_bundle(SyntheticContextProvider(provider), cfg, utt);
  const auto aligned = proj.align(bundle, 7);
  REQUIRE(aligned.size() == 2);
  for (const auto& t : aligned) CHECK(t.shape() == Shape{7, 16});
  CHECK(align_context(bundle, 7, proj).shape() == Shape{7, 2, 16});
  CHECK(stack_streams(aligned).shape() == Shape{7, 2, 16});
}

TEST_CASE("embedding files round trip at float32 precision") {
  const fs::path dir = scratch("emb");
  RngState rng(2);
  const Tensor t = oracle::random_tensor({3, 5}, rng);
  write_embedding_file(dir / "a.ctx", t);
  const Tensor back = read_embedding_file(dir / "a.ctx");
  CHECK(back.shape() == t.shape());
  for (std::size_t i = 0; i < t.numel(); ++i) CHECK(back[i] == static_cast<double>(static_cast<float>(t[i])));

  std::ofstream(dir / "bad.ctx", std::ios::binary) << "NOPE0000";
  CHECK_THROWS_AS(read_embedding_file(dir / "bad.ctx"), FormatError);
  CHECK_THROWS_AS(read_embedding_file(dir / "missing.ctx"), FormatError);
}

TEST_CASE("external provider reads speaker files and falls back for the rest") {
  const fs::path dir = scratch("ext");
  const auto utt = generate_dataset(TaskSpec{}, 1, 7)[0];
  const Tensor spk = Tensor::matrix({{0.5, -0.25, 1.0}});
  write_embedding_file(ExternalContextProvider::file_for(dir, utt.id, StreamKind::Speaker), spk);
  const ExternalContextProvider provider(dir, std::make_shared<SyntheticContextProvider>(ProviderConfig{}));
  const Tensor got = provider.stream(StreamKind::Speaker, utt);
  CHECK(got.shape() == Shape{1, 3});
  CHECK(got[1] == -0.25);
  CHECK(provider.stream(StreamKind::Lang2Vec, utt).cols() == ProviderConfig{}.lang_dim);
  CHECK_THROWS_AS(provider.stream(StreamKind::Event, utt), FormatError);
}

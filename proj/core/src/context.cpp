#include "ctxprune/context.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "ctxprune/errors.hpp"
#include "ctxprune/ops.hpp"

namespace ctxprune {

namespace {

constexpr std::uint64_t kSpeakerStream = 0x51;
constexpr std::uint64_t kEventStream = 0xe7;
constexpr std::uint64_t kLangStream = 0x1a;
constexpr std::uint64_t kJitterStream = 0x77;

Tensor unit_vector(RngState rng, std::size_t dim) {
  std::vector<double> v(dim);
  double norm = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return Tensor({1, dim}, std::move(v));
}

}  // namespace

std::string_view to_string(StreamKind kind) {
  switch (kind) {
    case StreamKind::Front: return "front";
    case StreamKind::Speaker: return "spk";
    case StreamKind::Event: return "event";
    case StreamKind::Lang2Vec: return "lang2vec";
  }
  return "?";
}

StreamKind stream_kind_from_string(std::string_view s) {
  if (s == "front") return StreamKind::Front;
  if (s == "spk") return StreamKind::Speaker;
  if (s == "event") return StreamKind::Event;
  if (s == "lang2vec") return StreamKind::Lang2Vec;
  throw ParameterError("unknown context stream '" + std::string(s) + "'");
}

ContextConfig ContextConfig::parse(std::string_view text) {
  ContextConfig c;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto next = text.find('+', pos);
    const auto part = text.substr(pos, next == std::string_view::npos ? std::string_view::npos : next - pos);
    const auto kind = stream_kind_from_string(part);
    if (c.has(kind)) throw ParameterError("context stream '" + std::string(part) + "' listed twice");
    c.streams.push_back(kind);
    if (next == std::string_view::npos) break;
    pos = next + 1;
  }
  if (c.streams.empty()) throw ParameterError("empty context configuration");
  return c;
}

std::string ContextConfig::name() const {
  std::string out;
  for (std::size_t i = 0; i < streams.size(); ++i) {
    if (i) out += '+';
    out += to_string(streams[i]);
  }
  return out;
}

bool ContextConfig::has(StreamKind kind) const {
  return std::find(streams.begin(), streams.end(), kind) != streams.end();
}

const std::vector<std::string>& standard_context_configs() {
  static const std::vector<std::string> kConfigs{"front",    "front+spk",           "front+event",
                                                 "front+spk+event", "lang2vec", "front+event+lang2vec"};
  return kConfigs;
}

std::size_t ProviderConfig::dim(StreamKind kind, std::size_t d_model) const {
  switch (kind) {
    case StreamKind::Front: return d_model;
    case StreamKind::Speaker: return speaker_dim;
    case StreamKind::Event: return event_dim;
    case StreamKind::Lang2Vec: return lang_dim;
  }
  return 0;
}

Tensor clean_speaker_embedding(int speaker_id, const ProviderConfig& config) {
  if (speaker_id < 0 || speaker_id >= config.n_speakers) {
    throw ParameterError("speaker id " + std::to_string(speaker_id) + " not configured");
  }
  return unit_vector(RngState(config.seed).split(kSpeakerStream).split(static_cast<std::uint64_t>(speaker_id)),
                     config.speaker_dim);
}

Tensor make_speaker_context(const SyntheticUtterance& utt, const ProviderConfig& config) {
  Tensor clean = clean_speaker_embedding(utt.speaker_id, config);
  RngState jitter = RngState(utt.seed).split(kJitterStream);
  std::vector<double> v(clean.data().begin(), clean.data().end());
  for (auto& x : v) x += config.speaker_jitter * jitter.normal();
  const std::size_t n = v.size();
  return Tensor({1, n}, std::move(v));
}

Tensor event_basis(int event_id, const ProviderConfig& config) {
  if (event_id < 0 || event_id >= config.n_events) {
    throw ParameterError("event id " + std::to_string(event_id) + " not configured");
  }
  if (static_cast<std::size_t>(config.n_events) <= config.event_dim) {
    // Orthonormal one-hot directions when they fit.
    std::vector<double> v(config.event_dim, 0.0);
    v[static_cast<std::size_t>(event_id)] = 1.0;
    return Tensor({1, config.event_dim}, std::move(v));
  }
  return unit_vector(RngState(config.seed).split(kEventStream).split(static_cast<std::uint64_t>(event_id)),
                     config.event_dim);
}

std::vector<double> frame_energy(const Tensor& features) {
  const std::size_t t = features.rows(), f = features.cols();
  std::vector<double> e(t, 0.0);
  const auto d = features.data();
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = 0; j < f; ++j) e[i] += d[i * f + j] * d[i * f + j];
    e[i] /= static_cast<double>(f);
  }
  return e;
}

Tensor make_event_context(const SyntheticUtterance& utt, const ProviderConfig& config) {
  const auto energy = frame_energy(utt.features);
  const std::size_t t = energy.size();
  const std::size_t tc = std::max<std::size_t>(1, t / 2);
  const Tensor basis = event_basis(utt.event_id, config);
  RngState noise = RngState(utt.seed).split(kEventStream);
  std::vector<double> v(tc * config.event_dim);
  for (std::size_t k = 0; k < tc; ++k) {
    double e = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 2 * k; i < std::min(t, 2 * k + 2); ++i, ++n) e += energy[i];
    if (n) e /= static_cast<double>(n);
    for (std::size_t j = 0; j < config.event_dim; ++j) {
      v[k * config.event_dim + j] = e * basis.data()[j] + config.event_noise * noise.normal();
    }
  }
  return Tensor({tc, config.event_dim}, std::move(v));
}

Tensor make_lang_vector(int language_id, const ProviderConfig& config) {
  if (language_id < 0 || language_id >= config.n_languages) {
    throw ParameterError("language id " + std::to_string(language_id) + " not configured");
  }
  // Low bits carry id+1 so vectors are pairwise distinct; the remaining bits
  // are fixed pseudo-random typological features.
  std::vector<double> v(config.lang_dim, 0.0);
  const auto code = static_cast<std::uint64_t>(language_id + 1);
  const std::uint64_t extra = mix64(config.seed ^ (kLangStream << 32) ^ code);
  for (std::size_t j = 0; j < config.lang_dim; ++j) {
    const std::uint64_t bit = j < 8 ? (code >> j) & 1U : (extra >> (j % 64)) & 1U;
    v[j] = static_cast<double>(bit);
  }
  if (config.lang_dim < 8 && (code >> config.lang_dim) != 0) {
    throw ParameterError("lang_dim too small to distinguish configured languages");
  }
  return Tensor({1, config.lang_dim}, std::move(v));
}

std::vector<StreamKind> ContextBundle::order() const {
  std::vector<StreamKind> out;
  for (const auto& s : streams) out.push_back(s.kind);
  return out;
}

Tensor SyntheticContextProvider::stream(StreamKind kind, const SyntheticUtterance& utt) const {
  switch (kind) {
    case StreamKind::Speaker: return make_speaker_context(utt, config_);
    case StreamKind::Event: return make_event_context(utt, config_);
    case StreamKind::Lang2Vec: return make_lang_vector(utt.language_id, config_);
    case StreamKind::Front: break;
  }
  throw ContractError("front stream is produced by the model frontend, not by a provider");
}

ExternalContextProvider::ExternalContextProvider(std::filesystem::path dir, std::shared_ptr<const ContextProvider> fallback)
    : dir_(std::move(dir)), fallback_(std::move(fallback)) {}

std::filesystem::path ExternalContextProvider::file_for(const std::filesystem::path& dir, std::size_t utt_id,
                                                        StreamKind kind) {
  return dir / ("utt" + std::to_string(utt_id) + "." + std::string(to_string(kind)) + ".ctx");
}

Tensor ExternalContextProvider::stream(StreamKind kind, const SyntheticUtterance& utt) const {
  if (kind == StreamKind::Speaker || kind == StreamKind::Event) {
    return read_embedding_file(file_for(dir_, utt.id, kind));
  }
  if (!fallback_) throw ContractError("no provider for stream " + std::string(to_string(kind)));
  return fallback_->stream(kind, utt);
}

ContextBundle build_bundle(const ContextProvider& provider, const ContextConfig& config, const SyntheticUtterance& utt) {
  ContextBundle b;
  for (auto kind : config.streams) {
    if (kind == StreamKind::Front) continue;
    b.streams.push_back({kind, provider.stream(kind, utt)});
  }
  return b;
}

Tensor align_length(const Tensor& raw, std::size_t length) {
  if (raw.rank() != 2 || raw.rows() == 0) {
    throw ContractError("context stream must be a non-empty [T_c x D_c] array, got " + shape_string(raw.shape()));
  }
  const std::size_t tc = raw.rows();
  if (tc == length) return raw;
  std::vector<std::size_t> index(length);
  for (std::size_t t = 0; t < length; ++t) index[t] = std::min(t, tc - 1);
  return gather_rows(raw, index);
}

ContextProjector::ContextProjector(ParamStore& store, const std::string& prefix, const ContextConfig& config,
                                   const std::vector<std::size_t>& stream_dims, std::size_t width, RngState& rng)
    : kinds_(config.streams), width_(width) {
  if (stream_dims.size() != kinds_.size()) throw DimensionError("one dimension per context stream expected");
  for (std::size_t i = 0; i < kinds_.size(); ++i) {
    projections_.push_back(
        make_linear(store, prefix + ".proj_" + std::string(to_string(kinds_[i])), stream_dims[i], width, rng));
  }
}

std::vector<Tensor> ContextProjector::align(const ContextBundle& bundle, std::size_t length) const {
  if (bundle.streams.empty()) throw ContractError("context bundle has no streams");
  if (bundle.order() != kinds_) throw ContractError("context bundle order does not match the projector");
  std::vector<Tensor> out;
  out.reserve(bundle.size());
  for (std::size_t i = 0; i < bundle.size(); ++i) {
    const Tensor& raw = bundle.streams[i].raw;
    if (raw.rank() != 2 || raw.rows() == 0) throw ContractError("zero-length context stream");
    if (raw.cols() != projections_[i].in_features()) {
      throw DimensionError("context stream " + std::string(to_string(kinds_[i])) + " has width " +
                           std::to_string(raw.cols()) + ", projector expects " +
                           std::to_string(projections_[i].in_features()));
    }
    // Length alignment commutes with the row-wise projection; aligning first
    // keeps the projection cost at `length` rows at most.
    const Tensor shaped = raw.rows() > length ? align_length(raw, length) : raw;
    out.push_back(align_length(projections_[i](shaped), length));
  }
  return out;
}

Tensor stack_streams(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw ContractError("nothing to stack");
  const std::size_t t = rows[0].rows(), d = rows[0].cols(), n = rows.size();
  std::vector<double> v(t * n * d);
  for (std::size_t k = 0; k < n; ++k) {
    if (rows[k].rows() != t || rows[k].cols() != d) throw DimensionError("stack_streams: shape mismatch");
    const auto src = rows[k].data();
    for (std::size_t i = 0; i < t; ++i)
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(i * d), d,
                  v.begin() + static_cast<std::ptrdiff_t>((i * n + k) * d));
  }
  return Tensor({t, n, d}, std::move(v));
}

Tensor align_context(const ContextBundle& bundle, std::size_t length, const ContextProjector& projector) {
  return stack_streams(projector.align(bundle, length));
}

void write_embedding_file(const std::filesystem::path& path, const Tensor& values) {
  static_assert(std::endian::native == std::endian::little, "embedding files are little-endian");
  if (values.rank() != 2) throw DimensionError("embedding file payload must be 2-D");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  const std::uint32_t header[3] = {1U, static_cast<std::uint32_t>(values.rows()), static_cast<std::uint32_t>(values.cols())};
  out.write("CTXE", 4);
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  for (double v : values.data()) {
    const auto f = static_cast<float>(v);
    out.write(reinterpret_cast<const char*>(&f), sizeof(f));
  }
}

Tensor read_embedding_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open embedding file " + path.string());
  char magic[4];
  std::uint32_t header[3];
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(header), sizeof(header));
  if (!in || std::memcmp(magic, "CTXE", 4) != 0) throw FormatError(path.string() + ": not an embedding file");
  if (header[0] != 1U) throw FormatError(path.string() + ": unsupported version " + std::to_string(header[0]));
  if (header[1] == 0 || header[2] == 0) throw ContractError(path.string() + ": zero-length context stream");
  const std::size_t n = static_cast<std::size_t>(header[1]) * header[2];
  std::vector<float> buf(n);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(float)));
  if (!in) throw FormatError(path.string() + ": truncated payload");
  return Tensor({header[1], header[2]}, std::vector<double>(buf.begin(), buf.end()));
}

}  // namespace ctxprune

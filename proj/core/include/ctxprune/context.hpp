#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "ctxprune/nn.hpp"
#include "ctxprune/rng.hpp"
#include "ctxprune/tensor.hpp"

namespace ctxprune {

enum class StreamKind { Front, Speaker, Event, Lang2Vec };

std::string_view to_string(StreamKind kind);
StreamKind stream_kind_from_string(std::string_view s);

/// Ordered set of context streams, written "front+spk+event" etc.
struct ContextConfig {
  std::vector<StreamKind> streams;

  /// Accepts '+'-joined stream names ("front", "spk", "event", "lang2vec").
  /// Throws ParameterError on unknown or repeated names.
  static ContextConfig parse(std::string_view text);
  std::string name() const;
  bool has(StreamKind kind) const;
  std::size_t size() const { return streams.size(); }
};

/// Context combinations swept by the experiments (front, front+spk, ...).
const std::vector<std::string>& standard_context_configs();

/// A synthetic utterance: features, per-frame speech labels, target tokens
/// and the discrete identities the context providers draw from.
struct SyntheticUtterance {
  std::size_t id = 0;
  Tensor features;                         // [T x F]
  std::vector<std::uint8_t> frame_labels;  // 1 = speech
  std::vector<int> targets;
  int speaker_id = 0;
  int event_id = 0;
  int language_id = 0;
  std::uint64_t seed = 0;

  std::size_t frames() const { return features.rows(); }
};

struct ProviderConfig {
  std::size_t speaker_dim = 16;
  std::size_t event_dim = 8;
  std::size_t lang_dim = 8;
  int n_speakers = 8;
  int n_events = 4;
  int n_languages = 3;
  double speaker_jitter = 0.01;
  double event_noise = 0.01;
  std::uint64_t seed = 0x5eed;

  std::size_t dim(StreamKind kind, std::size_t d_model) const;
};

/// Unit-norm per-speaker vector, a pure function of (seed, speaker_id).
Tensor clean_speaker_embedding(int speaker_id, const ProviderConfig& config);
/// [1 x speaker_dim]: the clean vector plus N(0, jitter^2) utterance noise.
Tensor make_speaker_context(const SyntheticUtterance& utt, const ProviderConfig& config);

/// Unit basis direction for an event id.
Tensor event_basis(int event_id, const ProviderConfig& config);
/// [max(1, T/2) x event_dim]: row k is the event basis scaled by the mean
/// energy of frames 2k and 2k+1, plus small noise.
Tensor make_event_context(const SyntheticUtterance& utt, const ProviderConfig& config);

/// [1 x lang_dim] binary vector, distinct per configured language.
Tensor make_lang_vector(int language_id, const ProviderConfig& config);

/// Mean squared feature value per frame.
std::vector<double> frame_energy(const Tensor& features);

struct ContextStream {
  StreamKind kind;
  Tensor raw;  // [T_c x D_c]
};

/// Raw context streams of one utterance in configuration order.
struct ContextBundle {
  std::vector<ContextStream> streams;

  std::size_t size() const { return streams.size(); }
  std::vector<StreamKind> order() const;
};

/// Source of the non-front streams.
class ContextProvider {
 public:
  virtual ~ContextProvider() = default;
  virtual Tensor stream(StreamKind kind, const SyntheticUtterance& utt) const = 0;
};

class SyntheticContextProvider : public ContextProvider {
 public:
  explicit SyntheticContextProvider(ProviderConfig config) : config_(config) {}
  Tensor stream(StreamKind kind, const SyntheticUtterance& utt) const override;
  const ProviderConfig& config() const { return config_; }

 private:
  ProviderConfig config_;
};

/// Reads speaker/event streams from `<dir>/<utt-id>.<stream>.ctx`; other
/// streams come from `fallback`.
class ExternalContextProvider : public ContextProvider {
 public:
  ExternalContextProvider(std::filesystem::path dir, std::shared_ptr<const ContextProvider> fallback);
  Tensor stream(StreamKind kind, const SyntheticUtterance& utt) const override;
  static std::filesystem::path file_for(const std::filesystem::path& dir, std::size_t utt_id, StreamKind kind);

 private:
  std::filesystem::path dir_;
  std::shared_ptr<const ContextProvider> fallback_;
};

/// Front streams are model activations and are inserted later, so they are
/// skipped here.
ContextBundle build_bundle(const ContextProvider& provider, const ContextConfig& config, const SyntheticUtterance& utt);

/// Stretch or cut a [T_c x D_c] stream to `length` rows: repeat the final row
/// when short, drop the tail when long.
Tensor align_length(const Tensor& raw, std::size_t length);

/// Learned per-stream projections D_c -> D.
class ContextProjector {
 public:
  ContextProjector() = default;
  ContextProjector(ParamStore& store, const std::string& prefix, const ContextConfig& config,
                   const std::vector<std::size_t>& stream_dims, std::size_t width, RngState& rng);

  /// One [length x D] tensor per stream, in bundle order.
  std::vector<Tensor> align(const ContextBundle& bundle, std::size_t length) const;
  std::size_t width() const { return width_; }

 private:
  std::vector<StreamKind> kinds_;
  std::vector<Linear> projections_;
  std::size_t width_ = 0;
};

/// Stacked aligned context [T x D^C_0 x D].
Tensor align_context(const ContextBundle& bundle, std::size_t length, const ContextProjector& projector);

/// Stack equally shaped [T x D] tensors into [T x n x D] (plain values).
Tensor stack_streams(const std::vector<Tensor>& rows);

// External embedding files: 4-byte magic "CTXE", uint32 version (1), uint32
// rows, uint32 cols, then rows*cols little-endian float32 values, row-major.
void write_embedding_file(const std::filesystem::path& path, const Tensor& values);
Tensor read_embedding_file(const std::filesystem::path& path);

}  // namespace ctxprune

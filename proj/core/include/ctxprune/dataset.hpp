#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ctxprune/context.hpp"

namespace ctxprune {

// Fixed 32-symbol vocabulary:
//   0 <pad>, 1 <eos>, 2..4 language start tags,
//   5..17 word-initial pieces (surface begins with a space),
//   18..31 continuation pieces.
namespace vocab {
inline constexpr int kPad = 0;
inline constexpr int kEos = 1;
inline constexpr int kFirstLanguage = 2;
inline constexpr int kLanguages = 3;
inline constexpr int kFirstWordStart = 5;
inline constexpr int kWordStarts = 13;
inline constexpr int kFirstContinuation = 18;
inline constexpr int kContinuations = 14;
inline constexpr int kSize = 32;

/// Printable form; word-initial pieces carry a leading space.
std::string surface(int token);
/// Read from the surface form only.
bool starts_word(const std::string& surface);
int language_tag(int language_id);
}  // namespace vocab

enum class TaskKind { AsrLike, StLike };

struct TaskSpec {
  TaskKind kind = TaskKind::AsrLike;
  int n_languages = 3;
  int n_speakers = 8;
  int n_events = 4;
  std::size_t feature_dim = 16;
  /// Utterance-level silence fraction is drawn from [min, max].
  double silence_min = 0.25;
  double silence_max = 0.35;
  std::size_t min_tokens = 3;
  std::size_t max_tokens = 6;
  std::size_t frames_per_token = 3;
  /// Token prototype and speaker offset scales; silence is noise only.
  double speech_noise = 0.3;
  double speaker_offset = 0.2;
  double silence_noise = 0.1;
  /// Constant added to every bin of a speech frame, like the broadband level
  /// rise of speech in log-mel features.
  double speech_level = 1.0;
  /// With phones > 0, frame r of a token shows phone r of the token's code
  /// (distinct phone sequences over a shared inventory of this size), so one
  /// frame alone is ambiguous. 0 repeats the whole token prototype per frame.
  std::size_t phones = 4;
  /// Fixes the token prototypes and speaker offsets (shared by all splits).
  std::uint64_t task_seed = 0x7a5c;

  void validate() const;
};

/// `n` utterances; utterance i depends only on (task, seed, i).
std::vector<SyntheticUtterance> generate_dataset(const TaskSpec& task, std::size_t n, std::uint64_t seed);

/// Decoder input (language tag followed by the targets) and the expected
/// next tokens (targets followed by <eos>).
std::vector<int> decoder_inputs(const SyntheticUtterance& utt);
std::vector<int> decoder_targets(const SyntheticUtterance& utt);

}  // namespace ctxprune

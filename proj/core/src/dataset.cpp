#include "ctxprune/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ctxprune/errors.hpp"

namespace ctxprune {

namespace vocab {

std::string surface(int token) {
  if (token == kPad) return "<pad>";
  if (token == kEos) return "<eos>";
  if (token >= kFirstLanguage && token < kFirstLanguage + kLanguages) {
    return "<lang" + std::to_string(token - kFirstLanguage) + ">";
  }
  auto piece = [](int k) {
    return std::string{static_cast<char>('a' + k % 13), static_cast<char>('n' + k / 13)};
  };
  if (token >= kFirstWordStart && token < kFirstWordStart + kWordStarts) return " " + piece(token - kFirstWordStart);
  if (token >= kFirstContinuation && token < kFirstContinuation + kContinuations) {
    return piece(token - kFirstContinuation + kWordStarts);
  }
  throw ParameterError("token " + std::to_string(token) + " outside the vocabulary");
}

bool starts_word(const std::string& surface) { return !surface.empty() && surface.front() == ' '; }

int language_tag(int language_id) {
  if (language_id < 0 || language_id >= kLanguages) {
    throw ParameterError("language id " + std::to_string(language_id) + " has no start tag");
  }
  return kFirstLanguage + language_id;
}

}  // namespace vocab

namespace {

constexpr std::uint64_t kPrototypeStream = 0x9e01;
constexpr std::uint64_t kSpeakerOffsetStream = 0x9e02;
constexpr std::uint64_t kRemapStream = 0x9e03;
constexpr std::uint64_t kPhoneStream = 0x9e04;

std::vector<double> gaussian_row(RngState rng, std::size_t dim, double scale) {
  std::vector<double> v(dim);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

// Class-preserving permutation of the vocabulary for one target language.
std::vector<int> language_remap(const TaskSpec& task, int language_id) {
  std::vector<int> map(vocab::kSize);
  std::iota(map.begin(), map.end(), 0);
  RngState rng = RngState(task.task_seed).split(kRemapStream).split(static_cast<std::uint64_t>(language_id));
  auto shuffle = [&](int first, int count) {
    for (int i = count - 1; i > 0; --i) {
      const int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(i + 1)));
      std::swap(map[first + i], map[first + j]);
    }
  };
  shuffle(vocab::kFirstWordStart, vocab::kWordStarts);
  shuffle(vocab::kFirstContinuation, vocab::kContinuations);
  return map;
}

}  // namespace

void TaskSpec::validate() const {
  auto fail = [](const std::string& m) { throw ParameterError("task spec: " + m); };
  if (n_languages < 1 || n_languages > vocab::kLanguages) fail("n_languages must be in [1, 3]");
  if (n_speakers < 1 || n_events < 1) fail("need at least one speaker and one event");
  if (feature_dim == 0 || frames_per_token == 0) fail("sizes must be positive");
  if (min_tokens < 1 || max_tokens < min_tokens) fail("token range must satisfy 1 <= min <= max");
  if (!(silence_min >= 0.0 && silence_max >= silence_min && silence_max < 1.0)) fail("silence range must lie in [0, 1)");
  if (phones > 0) {
    double codes = 1.0;
    for (std::size_t r = 0; r < frames_per_token; ++r) codes *= static_cast<double>(phones);
    if (codes < vocab::kSize) fail("phones^frames_per_token must cover the vocabulary");
  }
}

std::vector<SyntheticUtterance> generate_dataset(const TaskSpec& task, std::size_t n, std::uint64_t seed) {
  task.validate();
  if (n == 0) throw ParameterError("dataset size must be at least 1");
  const std::size_t f = task.feature_dim;
  const RngState task_rng(task.task_seed);

  std::vector<std::vector<double>> prototype(vocab::kSize);
  for (int tok = 0; tok < vocab::kSize; ++tok) {
    prototype[tok] = gaussian_row(task_rng.split(kPrototypeStream).split(static_cast<std::uint64_t>(tok)), f, 1.0);
  }
  // Per token, the pattern of each of its frames.
  std::vector<std::vector<std::vector<double>>> frame_pattern(vocab::kSize);
  if (task.phones == 0) {
    for (int tok = 0; tok < vocab::kSize; ++tok) frame_pattern[tok].assign(task.frames_per_token, prototype[tok]);
  } else {
    std::vector<std::vector<double>> phone(task.phones);
    for (std::size_t k = 0; k < task.phones; ++k) phone[k] = gaussian_row(task_rng.split(kPhoneStream).split(k), f, 1.0);
    std::size_t n_codes = 1;
    for (std::size_t r = 0; r < task.frames_per_token; ++r) {
      n_codes *= task.phones;
      if (n_codes > 4096) break;
    }
    // Partial Fisher-Yates over code indices picks kSize distinct codes.
    std::vector<std::size_t> code(n_codes);
    std::iota(code.begin(), code.end(), 0);
    RngState pick = task_rng.split(kPhoneStream).split(~0ULL);
    for (int tok = 0; tok < vocab::kSize; ++tok) {
      const auto i = static_cast<std::size_t>(tok);
      std::swap(code[i], code[i + pick.below(n_codes - i)]);
      std::size_t c = code[i];
      for (std::size_t r = 0; r < task.frames_per_token; ++r) {
        frame_pattern[tok].push_back(phone[c % task.phones]);
        c /= task.phones;
      }
    }
  }
  std::vector<std::vector<double>> speaker(static_cast<std::size_t>(task.n_speakers));
  for (int s = 0; s < task.n_speakers; ++s) {
    speaker[s] = gaussian_row(task_rng.split(kSpeakerOffsetStream).split(static_cast<std::uint64_t>(s)), f,
                              task.speaker_offset);
  }
  std::vector<std::vector<int>> remap;
  for (int l = 0; l < task.n_languages; ++l) remap.push_back(language_remap(task, l));

  std::vector<SyntheticUtterance> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    RngState rng = RngState(seed).split(i);
    SyntheticUtterance u;
    u.id = i;
    u.seed = mix64(seed ^ mix64(i + 1));
    u.speaker_id = static_cast<int>(rng.below(static_cast<std::uint64_t>(task.n_speakers)));
    u.event_id = static_cast<int>(rng.below(static_cast<std::uint64_t>(task.n_events)));
    u.language_id = static_cast<int>(rng.below(static_cast<std::uint64_t>(task.n_languages)));

    // Words: one word-initial piece followed by up to two continuations.
    const std::size_t n_tokens = task.min_tokens + rng.below(task.max_tokens - task.min_tokens + 1);
    std::vector<int> source;
    while (source.size() < n_tokens) {
      source.push_back(vocab::kFirstWordStart + static_cast<int>(rng.below(vocab::kWordStarts)));
      const std::size_t cont = rng.below(3);
      for (std::size_t c = 0; c < cont && source.size() < n_tokens; ++c) {
        source.push_back(vocab::kFirstContinuation + static_cast<int>(rng.below(vocab::kContinuations)));
      }
    }

    const std::size_t speech = n_tokens * task.frames_per_token;
    const double ratio = task.silence_min + (task.silence_max - task.silence_min) * rng.uniform();
    const auto silence = static_cast<std::size_t>(std::lround(static_cast<double>(speech) * ratio / (1.0 - ratio)));
    // Silence frames go to the n_tokens + 1 gaps (edges and between tokens).
    std::vector<std::size_t> gap(n_tokens + 1, 0);
    for (std::size_t s = 0; s < silence; ++s) ++gap[rng.below(gap.size())];

    const std::size_t t_total = speech + silence;
    std::vector<double> feats;
    feats.reserve(t_total * f);
    auto silent_frame = [&] {
      for (std::size_t k = 0; k < f; ++k) feats.push_back(task.silence_noise * rng.normal());
      u.frame_labels.push_back(0);
    };
    for (std::size_t k = 0; k < n_tokens; ++k) {
      for (std::size_t s = 0; s < gap[k]; ++s) silent_frame();
      for (std::size_t r = 0; r < task.frames_per_token; ++r) {
        const auto& proto = frame_pattern[source[k]][r];
        for (std::size_t c = 0; c < f; ++c) {
          feats.push_back(task.speech_level + proto[c] + speaker[u.speaker_id][c] + task.speech_noise * rng.normal());
        }
        u.frame_labels.push_back(1);
      }
    }
    for (std::size_t s = 0; s < gap[n_tokens]; ++s) silent_frame();
    u.features = Tensor({t_total, f}, std::move(feats));

    u.targets = source;
    if (task.kind == TaskKind::StLike) {
      for (auto& tok : u.targets) tok = remap[u.language_id][tok];
    }
    out.push_back(std::move(u));
  }
  return out;
}

std::vector<int> decoder_inputs(const SyntheticUtterance& utt) {
  std::vector<int> in{vocab::language_tag(utt.language_id)};
  in.insert(in.end(), utt.targets.begin(), utt.targets.end());
  return in;
}

std::vector<int> decoder_targets(const SyntheticUtterance& utt) {
  std::vector<int> out = utt.targets;
  out.push_back(vocab::kEos);
  return out;
}

}  // namespace ctxprune

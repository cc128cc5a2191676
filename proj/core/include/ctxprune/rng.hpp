#pragma once

#include <cstdint>

namespace ctxprune {

/// Counter-based random stream. Sample k of a stream is a pure function of
/// (seed, k), so copying the state replays the same draws bit for bit.
class RngState {
 public:
  RngState() = default;
  explicit RngState(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t position() const { return counter_; }

  std::uint64_t next_u64();
  /// Uniform in [1e-12, 1 - 1e-12].
  double uniform();
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  /// Independent stream derived from this seed and a stream id. Does not
  /// advance this stream.
  RngState split(std::uint64_t stream_id) const;

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t counter_ = 0;
};

/// Stateless 64-bit mixer (splitmix64 finalizer).
std::uint64_t mix64(std::uint64_t x);

}  // namespace ctxprune

#include "ctxprune/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace ctxprune {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t RngState::next_u64() {
  const std::uint64_t k = counter_++;
  return mix64(mix64(seed_) ^ (k * 0xd1b54a32d192ed03ULL));
}

double RngState::uniform() {
  constexpr double kLo = 1e-12;
  constexpr double kHi = 1.0 - 1e-12;
  const double u = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  return std::clamp(u, kLo, kHi);
}

double RngState::normal() {
  const double u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t RngState::below(std::uint64_t n) {
  if (n <= 1) return 0;
  // Rejection keeps the result unbiased.
  const std::uint64_t limit = (0 - n) % n;
  for (;;) {
    const std::uint64_t r = next_u64();
    if (r >= limit) return r % n;
  }
}

RngState RngState::split(std::uint64_t stream_id) const {
  return RngState(mix64(seed_ ^ mix64(stream_id + 0x632be59bd9b4e019ULL)));
}

}  // namespace ctxprune

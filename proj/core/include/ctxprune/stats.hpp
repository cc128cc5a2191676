#pragma once

#include <cstddef>
#include <limits>
#include <span>
#include <string>

namespace ctxprune {

struct StatTestResult {
  std::string test;
  /// U_a for Mann-Whitney, t for Welch.
  double statistic = 0.0;
  double p_value = 1.0;
  std::size_t n_a = 0;
  std::size_t n_b = 0;
  /// Welch-Satterthwaite degrees of freedom (NaN for Mann-Whitney).
  double df = std::numeric_limits<double>::quiet_NaN();
  /// "exact", "normal" or "t"; "n/a" when the test could not be run.
  std::string method;
  bool applicable = true;
};

/// "<1e-12" below the reporting floor, otherwise the shortest round-trip form.
std::string format_p_value(double p);

enum class MannWhitneyMethod { Auto, Exact, Normal };

/// Two-sided Mann-Whitney U. U_a counts pairs with a > b, ties counting 1/2
/// (computed from midranks). Auto uses the exact null distribution of the
/// tied rank sum when n_a * n_b <= 10^4 and the tie- and continuity-corrected
/// normal approximation otherwise. Empty input throws ParameterError.
StatTestResult mann_whitney_u(std::span<const double> a, std::span<const double> b,
                              MannWhitneyMethod method = MannWhitneyMethod::Auto);

/// Welch's unequal-variance t-test, two-sided p from the Student t CDF with
/// Welch-Satterthwaite df. Needs n >= 2 in both groups and nonzero variance in
/// at least one; otherwise ParameterError.
StatTestResult welch_t(std::span<const double> a, std::span<const double> b);

/// Result marked not applicable (e.g. an empty group).
StatTestResult not_applicable(const std::string& test, std::size_t n_a, std::size_t n_b);

}  // namespace ctxprune

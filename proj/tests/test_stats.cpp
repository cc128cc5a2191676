#include <doctest.h>

#include <cmath>
#include <vector>

#include "ctxprune/errors.hpp"
#include "ctxprune/stats.hpp"
#include "oracles.hpp"
#include "reference_values.inc"

using namespace ctxprune;

TEST_CASE("Mann-Whitney reference values") {
  for (const auto& f : kMannWhitneyFixtures) {
    const auto r = mann_whitney_u(f.a, f.b, f.exact ? MannWhitneyMethod::Auto : MannWhitneyMethod::Normal);
    CHECK(r.method == (f.exact ? "exact" : "normal"));
    CHECK(r.statistic == f.u);
    CHECK(r.p_value == doctest::Approx(f.p).epsilon(1e-10));
  }
}

TEST_CASE("Mann-Whitney exact against enumeration") {
  RngState rng(12);
  for (int k = 0; k < 40; ++k) {
    std::vector<double> a(1 + rng.below(6)), b(1 + rng.below(6));
    for (auto& v : a) v = static_cast<double>(rng.below(4));
    for (auto& v : b) v = static_cast<double>(rng.below(4)) + 0.5 * static_cast<double>(rng.below(2));
    const auto ref = oracle::mann_whitney_enumerate(a, b);
    const auto got = mann_whitney_u(a, b, MannWhitneyMethod::Exact);
    CHECK(got.statistic == ref.u);
    CHECK(got.p_value == doctest::Approx(ref.p).epsilon(1e-12));
  }
}

TEST_CASE("Mann-Whitney edge cases") {
  const std::vector<double> a{1, 2, 3}, empty;
  CHECK_THROWS_AS(mann_whitney_u(a, empty), ParameterError);
  CHECK_THROWS_AS(mann_whitney_u(a, std::vector<double>{NAN}), ParameterError);
  // All values tied: no evidence either way.
  const auto r = mann_whitney_u(std::vector<double>{2, 2, 2}, std::vector<double>{2, 2});
  CHECK(r.statistic == 3.0);
  CHECK(r.p_value == 1.0);
  // Normal approximation agrees roughly with the exact answer on a mid-size sample.
  std::vector<double> x, y;
  for (int i = 0; i < 30; ++i) x.push_back(i * 0.7), y.push_back(i * 0.7 + 3.1);
  const double exact = mann_whitney_u(x, y, MannWhitneyMethod::Exact).p_value;
  const double normal = mann_whitney_u(x, y, MannWhitneyMethod::Normal).p_value;
  CHECK(normal == doctest::Approx(exact).epsilon(0.1));
}

TEST_CASE("Welch reference values") {
  for (const auto& f : kWelchFixtures) {
    const auto r = welch_t(f.a, f.b);
    CHECK(r.method == "t");
    CHECK(r.statistic == doctest::Approx(f.t).epsilon(1e-10));
    CHECK(r.df == doctest::Approx(f.df).epsilon(1e-10));
    CHECK(r.p_value == doctest::Approx(f.p).epsilon(1e-10));
  }
}

TEST_CASE("Welch input checks") {
  CHECK_THROWS_AS(welch_t(std::vector<double>{1}, std::vector<double>{1, 2}), ParameterError);
  CHECK_THROWS_AS(welch_t(std::vector<double>{1, 1}, std::vector<double>{2, 2}), ParameterError);
  // One constant group is fine.
  const auto r = welch_t(std::vector<double>{1, 1, 1}, std::vector<double>{2, 3, 4});
  CHECK(r.df == doctest::Approx(2.0));
}

TEST_CASE("p-value formatting") {
  CHECK(format_p_value(1e-15) == "<1e-12");
  CHECK(format_p_value(0.25) == "0.25");
  const auto na = not_applicable("welch", 0, 3);
  CHECK_FALSE(na.applicable);
  CHECK(na.method == "n/a");
}

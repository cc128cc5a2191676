#include "ctxprune/stats.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "ctxprune/dumps.hpp"
#include "ctxprune/errors.hpp"

namespace ctxprune {

namespace {

constexpr double kPFloor = 1e-12;
constexpr std::size_t kExactLimit = 10000;

struct Ranked {
  std::vector<double> ranks;  // midranks of the pooled sample, a first then b
  double tie_term = 0.0;      // sum over tie groups of t^3 - t
};

Ranked midranks(std::span<const double> a, std::span<const double> b) {
  const std::size_t n = a.size() + b.size();
  std::vector<double> pooled(a.begin(), a.end());
  pooled.insert(pooled.end(), b.begin(), b.end());
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return pooled[i] < pooled[j]; });
  Ranked r;
  r.ranks.assign(n, 0.0);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && pooled[idx[j + 1]] == pooled[idx[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r.ranks[idx[k]] = mid;
    const double t = static_cast<double>(j - i + 1);
    r.tie_term += t * t * t - t;
    i = j + 1;
  }
  return r;
}

// Exact permutation p-value: distribution of the rank sum of a random
// m-subset of the pooled midranks, m the smaller group size (U_b = n_a n_b - U_a
// has the same distance from the mean). Midranks are multiples of 1/2, so
// sums are tracked in half-units.
double exact_p(const std::vector<double>& ranks, std::size_t m, double dev_obs) {
  const std::size_t n = ranks.size();
  std::vector<std::size_t> h(n);
  for (std::size_t i = 0; i < n; ++i) h[i] = static_cast<std::size_t>(std::lround(2.0 * ranks[i]));
  std::vector<std::size_t> desc = h;
  std::sort(desc.begin(), desc.end(), std::greater<>());
  // counts[k][s]: subsets of size k with half-unit sum s. Doubles, since the
  // totals reach C(n, m); row k only spans the largest reachable sum.
  std::vector<std::vector<double>> counts(m + 1);
  std::size_t cap = 0;
  counts[0].assign(1, 1.0);
  for (std::size_t k = 1; k <= m; ++k) {
    cap += desc[k - 1];
    counts[k].assign(cap + 1, 0.0);
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = std::min(i + 1, m); k >= 1; --k) {
      auto& dst = counts[k];
      const auto& src = counts[k - 1];
      const std::size_t top = std::min(dst.size() - 1, src.size() - 1 + h[i]);
      for (std::size_t s = top + 1; s-- > h[i];) {
        const double c = src[s - h[i]];
        if (c != 0.0) dst[s] += c;
      }
    }
  }
  const double nm = static_cast<double>(m), mu = nm * static_cast<double>(n - m) / 2.0;
  const double offset = nm * (nm + 1.0) / 2.0;
  double hit = 0.0, all = 0.0;
  for (std::size_t s = 0; s < counts[m].size(); ++s) {
    const double c = counts[m][s];
    if (c == 0.0) continue;
    all += c;
    const double u = static_cast<double>(s) / 2.0 - offset;
    if (std::abs(u - mu) >= dev_obs - 1e-9) hit += c;
  }
  return std::min(1.0, hit / all);
}

double mean_of(std::span<const double> x) { return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size()); }

double variance_of(std::span<const double> x, double m) {
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size() - 1);
}

}  // namespace

std::string format_p_value(double p) {
  if (p < kPFloor) return "<1e-12";
  return format_double(p);
}

StatTestResult not_applicable(const std::string& test, std::size_t n_a, std::size_t n_b) {
  StatTestResult r;
  r.test = test;
  r.n_a = n_a;
  r.n_b = n_b;
  r.statistic = std::numeric_limits<double>::quiet_NaN();
  r.p_value = std::numeric_limits<double>::quiet_NaN();
  r.method = "n/a";
  r.applicable = false;
  return r;
}

StatTestResult mann_whitney_u(std::span<const double> a, std::span<const double> b, MannWhitneyMethod method) {
  if (a.empty() || b.empty()) throw ParameterError("Mann-Whitney U needs two non-empty samples");
  for (double v : a)
    if (std::isnan(v)) throw ParameterError("Mann-Whitney U: NaN sample");
  for (double v : b)
    if (std::isnan(v)) throw ParameterError("Mann-Whitney U: NaN sample");
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size()), n = na + nb;
  const Ranked r = midranks(a, b);
  const double rank_sum = std::accumulate(r.ranks.begin(), r.ranks.begin() + static_cast<std::ptrdiff_t>(a.size()), 0.0);

  StatTestResult out;
  out.test = "mann_whitney_u";
  out.n_a = a.size();
  out.n_b = b.size();
  out.statistic = rank_sum - na * (na + 1.0) / 2.0;
  const double mu = na * nb / 2.0;

  const bool exact = method == MannWhitneyMethod::Exact ||
                     (method == MannWhitneyMethod::Auto && a.size() * b.size() <= kExactLimit);
  if (exact) {
    out.method = "exact";
    out.p_value = exact_p(r.ranks, std::min(a.size(), b.size()), std::abs(out.statistic - mu));
    return out;
  }
  out.method = "normal";
  const double var = na * nb / 12.0 * ((n + 1.0) - r.tie_term / (n * (n - 1.0)));
  if (!(var > 0.0)) {
    out.p_value = 1.0;
    return out;
  }
  const double z = std::max(0.0, std::abs(out.statistic - mu) - 0.5) / std::sqrt(var);
  out.p_value = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
  return out;
}

StatTestResult welch_t(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw ParameterError("Welch's t-test needs at least two samples per group");
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double ma = mean_of(a), mb = mean_of(b);
  const double va = variance_of(a, ma), vb = variance_of(b, mb);
  if (va == 0.0 && vb == 0.0) throw ParameterError("Welch's t-test: both samples have zero variance");
  const double sa = va / na, sb = vb / nb;
  StatTestResult out;
  out.test = "welch_t";
  out.method = "t";
  out.n_a = a.size();
  out.n_b = b.size();
  out.statistic = (ma - mb) / std::sqrt(sa + sb);
  out.df = (sa + sb) * (sa + sb) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
  if (!std::isfinite(out.statistic)) throw NumericError("Welch's t-test: non-finite statistic");
  const boost::math::students_t dist(out.df);
  out.p_value = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(out.statistic))));
  return out;
}

}  // namespace ctxprune

#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ctxprune/ops.hpp"

namespace oracle {

using namespace ctxprune;

Tensor random_tensor(const Shape& shape, RngState& rng, double scale, bool requires_grad) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor(shape, std::move(v), requires_grad);
}

GradCheckResult check_gradients(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                                std::vector<Tensor> inputs, RngState& rng, double h, std::size_t max_coords,
                                double floor) {
  const Tensor probe = f(inputs);
  const Tensor weights = random_tensor(probe.shape(), rng);
  auto objective = [&] {
    const Tensor out = f(inputs);
    double s = 0.0;
    for (std::size_t i = 0; i < out.numel(); ++i) s += out[i] * weights[i];
    return s;
  };

  for (auto& t : inputs) t.zero_grad();
  backward(sum(mul(f(inputs), weights)));
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) {
    analytic.emplace_back(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.back().begin());
  }

  // Evaluated with recording on: some ops pick a different (equal-valued)
  // path when no graph is built, which would hide gate masks from the probe.
  GradCheckResult res;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<std::size_t> coords(inputs[i].numel());
    for (std::size_t k = 0; k < coords.size(); ++k) coords[k] = k;
    if (max_coords && coords.size() > max_coords) {
      for (std::size_t k = 0; k < max_coords; ++k) std::swap(coords[k], coords[k + rng.below(coords.size() - k)]);
      coords.resize(max_coords);
    }
    auto data = inputs[i].mutable_data();
    for (std::size_t k : coords) {
      const double saved = data[k];
      auto at = [&](double offset) {
        data[k] = saved + offset;
        return objective();
      };
      // Fourth-order central stencil.
      const double numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
      data[k] = saved;
      const double a = analytic[i][k];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++res.checked;
      if (err > res.max_rel_err) {
        res.max_rel_err = err;
        std::ostringstream ss;
        ss << "input " << i << "[" << k << "]: " << a << " vs " << numeric;
        res.worst = ss.str();
      }
    }
  }
  return res;
}

BruteForceMw mann_whitney_enumerate(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> pooled(a);
  pooled.insert(pooled.end(), b.begin(), b.end());
  const std::size_t n = pooled.size(), na = a.size();
  // Twice U, so ties stay integral.
  auto twice_u = [&](const std::vector<bool>& in_a) {
    long long s = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!in_a[i]) continue;
      for (std::size_t j = 0; j < n; ++j) {
        if (in_a[j]) continue;
        s += pooled[i] > pooled[j] ? 2 : pooled[i] == pooled[j] ? 1 : 0;
      }
    }
    return s;
  };
  std::vector<bool> observed(n, false);
  for (std::size_t i = 0; i < na; ++i) observed[i] = true;
  const long long u2 = twice_u(observed);
  const long long mu2 = static_cast<long long>(na * (n - na));  // 2 * n_a n_b / 2
  const long long dev = std::llabs(u2 - mu2);

  std::vector<bool> sel(n, false);
  std::fill(sel.begin(), sel.begin() + static_cast<std::ptrdiff_t>(na), true);
  std::size_t hit = 0, total = 0;
  // prev_permutation over a sorted-descending bool mask visits every subset once.
  do {
    ++total;
    if (std::llabs(twice_u(sel) - mu2) >= dev) ++hit;
  } while (std::prev_permutation(sel.begin(), sel.end()));
  return {static_cast<double>(u2) / 2.0, static_cast<double>(hit) / static_cast<double>(total)};
}

WelchManual welch_manual(const std::vector<double>& a, const std::vector<double>& b) {
  auto moments = [](const std::vector<double>& x) {
    long double m = 0.0L;
    for (double v : x) m += v;
    m /= static_cast<long double>(x.size());
    long double ss = 0.0L;
    for (double v : x) ss += (v - m) * (v - m);
    return std::pair{m, ss / static_cast<long double>(x.size() - 1)};
  };
  const auto [ma, va] = moments(a);
  const auto [mb, vb] = moments(b);
  const long double na = a.size(), nb = b.size();
  const long double sa = va / na, sb = vb / nb;
  WelchManual w;
  w.t = (ma - mb) / std::sqrt(sa + sb);
  w.df = (sa + sb) * (sa + sb) / (sa * sa / (na - 1.0L) + sb * sb / (nb - 1.0L));
  return w;
}

const std::vector<FlopsCase>& flops_cases() {
  using K = ModuleKind;
  static const std::vector<FlopsCase> cases = {
      // 4*10*8^2 + 2*10^2*8 = 2560 + 1600
      {"enc self-attn T=10 d=8", K::EncSelfAttn, 10, 0, 8, 16, 3, 4160},
      // 2*7*16*32
      {"enc ffn T=7 d=16 ffn=32", K::EncFFN, 7, 0, 16, 32, 3, 7168},
      // 5*(2*8*16 + 3*16 + 16*8) = 5*432
      {"cgmlp T=5 d=8 ffn=16 k=3", K::EncCgMLP, 5, 0, 8, 16, 3, 2160},
      // 2*4*64 + 2*9*64 + 2*4*9*8 = 512 + 1152 + 576
      {"src-attn L=4 S=9 d=8", K::DecSrcAttn, 4, 9, 8, 16, 3, 2240},
      // 4*3*64^2 + 2*3^2*64 = 49152 + 1152
      {"dec self-attn L=3 d=64", K::DecSelfAttn, 3, 0, 64, 128, 3, 50304},
      // 2*6*64*128
      {"dec ffn L=6 d=64 ffn=128", K::DecFFN, 6, 0, 64, 128, 3, 98304},
      // 2*2*4*8
      {"enc ffn T=2 d=4 ffn=8", K::EncFFN, 2, 0, 4, 8, 3, 128},
      // 12*(2*4*6 + 5*6 + 6*4) = 12*102
      {"cgmlp T=12 d=4 ffn=6 k=5", K::EncCgMLP, 12, 0, 4, 6, 5, 1224},
  };
  return cases;
}

}  // namespace oracle

#include "ctxprune/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "ctxprune/errors.hpp"

namespace ctxprune {

using detail::make_result;
using detail::Node;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

std::vector<std::size_t> contiguous_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

struct Broadcast {
  Shape out;
  std::vector<std::size_t> sa, sb;
};

Broadcast broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  if (a.size() != b.size()) {
    throw DimensionError(std::string(op) + ": rank mismatch " + shape_string(a) + " vs " + shape_string(b));
  }
  Broadcast bc;
  bc.out.resize(a.size());
  bc.sa = contiguous_strides(a);
  bc.sb = contiguous_strides(b);
  for (std::size_t d = 0; d < a.size(); ++d) {
    if (a[d] == b[d]) {
      bc.out[d] = a[d];
    } else if (a[d] == 1) {
      bc.out[d] = b[d];
      bc.sa[d] = 0;
    } else if (b[d] == 1) {
      bc.out[d] = a[d];
      bc.sb[d] = 0;
    } else {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    }
  }
  return bc;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <class F>
void broadcast_loop(const Broadcast& bc, F&& f) {
  const std::size_t r = bc.out.size();
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  const std::size_t n = shape_numel(bc.out);
  const std::size_t last = bc.out[r - 1];
  if (n == 0 || last == 0) return;
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  const std::size_t la = bc.sa[r - 1], lb = bc.sb[r - 1];
  for (std::size_t o = 0; o < n; o += last) {
    for (std::size_t j = 0; j < last; ++j) f(o + j, ia + j * la, ib + j * lb);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      ia += bc.sa[d];
      ib += bc.sb[d];
      if (idx[d] < bc.out[d]) break;
      ia -= bc.sa[d] * bc.out[d];
      ib -= bc.sb[d] * bc.out[d];
      idx[d] = 0;
    }
  }
}

// Generic broadcasting binary op. `fwd(x, y)`; `dx(x, y)` and `dy(x, y)` are
// the partial derivatives.
template <class Fwd, class Dx, class Dy>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Dx dx, Dy dy) {
  auto bc = broadcast_shapes(a.shape(), b.shape(), name);
  const auto& ad = a.node()->data;
  const auto& bd = b.node()->data;
  std::vector<double> out(shape_numel(bc.out));
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(ad[i], bd[i]);
  } else {
    broadcast_loop(bc, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = fwd(ad[i], bd[j]); });
  }
  auto fn = [bc, dx, dy](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const auto& g = self.grad;
    if (pa.requires_grad) {
      auto& ga = pa.ensure_grad();
      broadcast_loop(bc, [&](std::size_t o, std::size_t i, std::size_t j) { ga[i] += g[o] * dx(pa.data[i], pb.data[j]); });
    }
    if (pb.requires_grad) {
      auto& gb = pb.ensure_grad();
      broadcast_loop(bc, [&](std::size_t o, std::size_t i, std::size_t j) { gb[j] += g[o] * dy(pa.data[i], pb.data[j]); });
    }
  };
  return make_result(bc.out, std::move(out), {a.node(), b.node()}, std::move(fn));
}

// Elementwise unary op with derivative expressed through input x and output y.
template <class Fwd, class Deriv>
Tensor unary_op(const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto& xd = x.node()->data;
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = fwd(xd[i]);
  auto fn = [deriv](Node& self) {
    Node& p = *self.parents[0];
    auto& gp = p.ensure_grad();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i] * deriv(p.data[i], self.data[i]);
  };
  return make_result(x.shape(), std::move(out), {x.node()}, std::move(fn));
}

void require_rank(const Tensor& x, std::size_t r, const char* op) {
  if (x.rank() != r) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_string(x.shape()));
  }
}

// outer x n x inner decomposition around `axis`.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " invalid for " + shape_string(s));
  AxisSplit a;
  for (std::size_t d = 0; d < axis; ++d) a.outer *= s[d];
  a.n = s[axis];
  for (std::size_t d = axis + 1; d < s.size(); ++d) a.inner *= s[d];
  return a;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor scale(const Tensor& x, double s) {
  return unary_op(x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary_op(x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& x) {
  return unary_op(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary_op(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor square(const Tensor& x) {
  return unary_op(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary_op(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [inv_sqrt_2pi](double v, double) {
        return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.shape()[0]);
  const auto k = static_cast<Eigen::Index>(a.shape()[1]);
  const auto n = static_cast<Eigen::Index>(b.shape()[1]);
  std::vector<double> out(static_cast<std::size_t>(m * n));
  MutMap(out.data(), m, n).noalias() = ConstMap(a.node()->data.data(), m, k) * ConstMap(b.node()->data.data(), k, n);
  auto fn = [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    ConstMap g(self.grad.data(), m, n);
    if (pa.requires_grad) {
      MutMap(pa.ensure_grad().data(), m, k).noalias() += g * ConstMap(pb.data.data(), k, n).transpose();
    }
    if (pb.requires_grad) {
      MutMap(pb.ensure_grad().data(), k, n).noalias() += ConstMap(pa.data.data(), m, k).transpose() * g;
    }
  };
  return make_result(Shape{a.shape()[0], b.shape()[1]}, std::move(out), {a.node(), b.node()}, std::move(fn));
}

Tensor transpose(const Tensor& x) {
  require_rank(x, 2, "transpose");
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  const auto& xd = x.node()->data;
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xd[i * c + j];
  auto fn = [r, c](Node& self) {
    auto& gp = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gp[i * c + j] += self.grad[j * r + i];
  };
  return make_result(Shape{c, r}, std::move(out), {x.node()}, std::move(fn));
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto sp = split_axis(x.shape(), axis);
  const auto& xd = x.node()->data;
  for (double v : xd) {
    if (std::isnan(v)) throw NumericError("softmax: NaN input");
  }
  std::vector<double> out(xd.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < sp.n; ++k) mx = std::max(mx, xd[base + k * sp.inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) {
        const double e = std::exp(xd[base + k * sp.inner] - mx);
        out[base + k * sp.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < sp.n; ++k) out[base + k * sp.inner] /= total;
    }
  }
  auto fn = [sp](Node& self) {
    auto& gp = self.parents[0]->ensure_grad();
    const auto& y = self.data;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.n * sp.inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < sp.n; ++k) dot += g[base + k * sp.inner] * y[base + k * sp.inner];
        for (std::size_t k = 0; k < sp.n; ++k) {
          const std::size_t j = base + k * sp.inner;
          gp[j] += y[j] * (g[j] - dot);
        }
      }
    }
  };
  return make_result(x.shape(), std::move(out), {x.node()}, std::move(fn));
}

Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> allow) {
  require_rank(x, 2, "masked_softmax");
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  if (allow.size() != r * c) {
    throw DimensionError("masked_softmax: mask has " + std::to_string(allow.size()) + " entries for " +
                         shape_string(x.shape()));
  }
  const auto& xd = x.node()->data;
  std::vector<double> out(r * c, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) {
      const double v = xd[i * c + j];
      if (std::isnan(v)) throw NumericError("masked_softmax: NaN input");
      if (allow[i * c + j]) mx = std::max(mx, v);
    }
    if (!std::isfinite(mx)) continue;
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      if (!allow[i * c + j]) continue;
      const double e = std::exp(xd[i * c + j] - mx);
      out[i * c + j] = e;
      total += e;
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= total;
  }
  auto fn = [r, c](Node& self) {
    auto& gp = self.parents[0]->ensure_grad();
    const auto& y = self.data;
    const auto& g = self.grad;
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < c; ++j) gp[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
    }
  };
  return make_result(x.shape(), std::move(out), {x.node()}, std::move(fn));
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t c = x.shape().back();
  if (gamma.numel() != c || beta.numel() != c) {
    throw DimensionError("layer_norm: affine params " + shape_string(gamma.shape()) + "/" +
                         shape_string(beta.shape()) + " do not match input " + shape_string(x.shape()));
  }
  const std::size_t r = c ? x.numel() / c : 0;
  const auto& xd = x.node()->data;
  const auto& gd = gamma.node()->data;
  const auto& bd = beta.node()->data;
  std::vector<double> out(xd.size());
  std::vector<double> xhat(xd.size());
  std::vector<double> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xd[i * c + j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = xd[i * c + j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (xd[i * c + j] - mu) * inv_std[i];
      xhat[i * c + j] = h;
      out[i * c + j] = h * gd[j] + bd[j];
    }
  }
  auto fn = [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
    Node& px = *self.parents[0];
    Node& pg = *self.parents[1];
    Node& pb = *self.parents[2];
    const auto& g = self.grad;
    if (pg.requires_grad) {
      auto& gg = pg.ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * xhat[i * c + j];
    }
    if (pb.requires_grad) {
      auto& gb = pb.ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
    }
    if (px.requires_grad) {
      auto& gx = px.ensure_grad();
      const double cn = static_cast<double>(c);
      for (std::size_t i = 0; i < r; ++i) {
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          const double dh = g[i * c + j] * pg.data[j];
          s1 += dh;
          s2 += dh * xhat[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) {
          const double dh = g[i * c + j] * pg.data[j];
          gx[i * c + j] += inv_std[i] / cn * (cn * dh - s1 - xhat[i * c + j] * s2);
        }
      }
    }
  };
  return make_result(x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()}, std::move(fn));
}

Tensor conv1d_depthwise(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  require_rank(x, 2, "conv1d_depthwise");
  require_rank(kernel, 2, "conv1d_depthwise kernel");
  const std::size_t t = x.shape()[0], c = x.shape()[1], k = kernel.shape()[0];
  if (kernel.shape()[1] != c) {
    throw DimensionError("conv1d_depthwise: kernel " + shape_string(kernel.shape()) + " does not match input " +
                         shape_string(x.shape()));
  }
  if (k % 2 == 0) throw ParameterError("conv1d_depthwise: kernel size must be odd, got " + std::to_string(k));
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != c) throw DimensionError("conv1d_depthwise: bias size mismatch");
  const auto pad = static_cast<std::ptrdiff_t>((k - 1) / 2);
  const auto& xd = x.node()->data;
  const auto& wd = kernel.node()->data;
  std::vector<double> out(t * c, 0.0);
  for (std::size_t ti = 0; ti < t; ++ti) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      const auto src = static_cast<std::ptrdiff_t>(ti) + static_cast<std::ptrdiff_t>(ki) - pad;
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(t)) continue;
      for (std::size_t ci = 0; ci < c; ++ci) out[ti * c + ci] += wd[ki * c + ci] * xd[static_cast<std::size_t>(src) * c + ci];
    }
    if (has_bias) {
      const auto& bd = bias.node()->data;
      for (std::size_t ci = 0; ci < c; ++ci) out[ti * c + ci] += bd[ci];
    }
  }
  std::vector<std::shared_ptr<Node>> parents{x.node(), kernel.node()};
  if (has_bias) parents.push_back(bias.node());
  auto fn = [t, c, k, pad, has_bias](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    const auto& g = self.grad;
    for (std::size_t ti = 0; ti < t; ++ti) {
      for (std::size_t ki = 0; ki < k; ++ki) {
        const auto src = static_cast<std::ptrdiff_t>(ti) + static_cast<std::ptrdiff_t>(ki) - pad;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(t)) continue;
        const auto s = static_cast<std::size_t>(src);
        if (px.requires_grad) {
          auto& gx = px.ensure_grad();
          for (std::size_t ci = 0; ci < c; ++ci) gx[s * c + ci] += g[ti * c + ci] * pw.data[ki * c + ci];
        }
        if (pw.requires_grad) {
          auto& gw = pw.ensure_grad();
          for (std::size_t ci = 0; ci < c; ++ci) gw[ki * c + ci] += g[ti * c + ci] * px.data[s * c + ci];
        }
      }
    }
    if (has_bias && self.parents[2]->requires_grad) {
      auto& gb = self.parents[2]->ensure_grad();
      for (std::size_t ti = 0; ti < t; ++ti)
        for (std::size_t ci = 0; ci < c; ++ci) gb[ci] += g[ti * c + ci];
    }
  };
  return make_result(Shape{t, c}, std::move(out), std::move(parents), std::move(fn));
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t r = logits.shape()[0], v = logits.shape()[1];
  if (targets.size() != r) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_string(logits.shape()));
  }
  if (r == 0) throw DimensionError("cross_entropy: empty batch");
  const auto& ld = logits.node()->data;
  std::vector<double> probs(r * v);
  double loss = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    const int tgt = targets[i];
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= v) {
      throw ParameterError("cross_entropy: target " + std::to_string(tgt) + " outside vocabulary of " +
                           std::to_string(v));
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, ld[i * v + j]);
    double total = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      probs[i * v + j] = std::exp(ld[i * v + j] - mx);
      total += probs[i * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[i * v + j] /= total;
    loss += -(ld[i * v + static_cast<std::size_t>(tgt)] - mx - std::log(total));
  }
  loss /= static_cast<double>(r);
  std::vector<int> tg(targets.begin(), targets.end());
  auto fn = [r, v, probs = std::move(probs), tg = std::move(tg)](Node& self) {
    auto& gp = self.parents[0]->ensure_grad();
    const double g = self.grad[0] / static_cast<double>(r);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < v; ++j) gp[i * v + j] += g * probs[i * v + j];
      gp[i * v + static_cast<std::size_t>(tg[i])] -= g;
    }
  };
  return make_result(Shape{}, {loss}, {logits.node()}, std::move(fn));
}

Tensor embed(const Tensor& table, std::span<const int> ids) {
  require_rank(table, 2, "embed");
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw ParameterError("embed: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(vocab));
    }
    rows[i] = static_cast<std::size_t>(ids[i]);
  }
  (void)d;
  return gather_rows(table, rows);
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.node()->data) total += v;
  auto fn = [](Node& self) {
    auto& gp = self.parents[0]->ensure_grad();
    for (auto& g : gp) g += self.grad[0];
  };
  return make_result(Shape{}, {total}, {x.node()}, std::move(fn));
}

Tensor mean(const Tensor& x) {
  const auto n = x.numel();
  if (n == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Tensor sum_axis(const Tensor& x, std::size_t axis) {
  const auto sp = split_axis(x.shape(), axis);
  const auto& xd = x.node()->data;
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.n; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += xd[(o * sp.n + k) * sp.inner + i];
  Shape s = x.shape();
  s[axis] = 1;
  auto fn = [sp](Node& self) {
    auto& gp = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t k = 0; k < sp.n; ++k)
        for (std::size_t i = 0; i < sp.inner; ++i) gp[(o * sp.n + k) * sp.inner + i] += self.grad[o * sp.inner + i];
  };
  return make_result(std::move(s), std::move(out), {x.node()}, std::move(fn));
}

Tensor mean_rows(const Tensor& x) {
  require_rank(x, 2, "mean_rows");
  if (x.shape()[0] == 0) throw DimensionError("mean_rows of empty tensor");
  return scale(sum_axis(x, 0), 1.0 / static_cast<double>(x.shape()[0]));
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of nothing");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw DimensionError("concat: bad axis for " + shape_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) throw DimensionError("concat: " + shape_string(s) + " incompatible with " + shape_string(first));
    out_shape[axis] += s[axis];
  }
  const auto sp = split_axis(out_shape, axis);
  for (const auto& p : parts) widths.push_back(p.shape()[axis] * sp.inner);
  const std::size_t row = sp.n * sp.inner;
  std::vector<double> out(sp.outer * row);
  std::vector<std::shared_ptr<Node>> nodes;
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& pd = parts[k].node()->data;
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(o * widths[k]), widths[k],
                  out.begin() + static_cast<std::ptrdiff_t>(o * row + off));
    off += widths[k];
    nodes.push_back(parts[k].node());
  }
  auto fn = [sp, row, widths](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      Node& p = *self.parents[k];
      if (p.requires_grad) {
        auto& gp = p.ensure_grad();
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t i = 0; i < widths[k]; ++i) gp[o * widths[k] + i] += self.grad[o * row + off + i];
      }
      off += widths[k];
    }
  };
  return make_result(std::move(out_shape), std::move(out), std::move(nodes), std::move(fn));
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  const auto sp = split_axis(x.shape(), axis);
  if (start + length > sp.n) {
    throw DimensionError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of range for axis " + std::to_string(axis) + " of " + shape_string(x.shape()));
  }
  const auto& xd = x.node()->data;
  const std::size_t w = length * sp.inner;
  std::vector<double> out(sp.outer * w);
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>((o * sp.n + start) * sp.inner), w,
                out.begin() + static_cast<std::ptrdiff_t>(o * w));
  Shape s = x.shape();
  s[axis] = length;
  auto fn = [sp, start, w](Node& self) {
    auto& gp = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < w; ++i) gp[(o * sp.n + start) * sp.inner + i] += self.grad[o * w + i];
  };
  return make_result(std::move(s), std::move(out), {x.node()}, std::move(fn));
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
  require_rank(x, 2, "gather_rows");
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  const auto& xd = x.node()->data;
  std::vector<double> out(index.size() * c);
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] >= r) throw DimensionError("gather_rows: row " + std::to_string(index[k]) + " of " + std::to_string(r));
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(index[k] * c), c, out.begin() + static_cast<std::ptrdiff_t>(k * c));
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  auto fn = [c, idx = std::move(idx)](Node& self) {
    auto& gp = self.parents[0]->ensure_grad();
    for (std::size_t k = 0; k < idx.size(); ++k)
      for (std::size_t j = 0; j < c; ++j) gp[idx[k] * c + j] += self.grad[k * c + j];
  };
  return make_result(Shape{index.size(), c}, std::move(out), {x.node()}, std::move(fn));
}

Tensor scatter_rows(const Tensor& x, std::span<const std::size_t> index, std::size_t rows) {
  require_rank(x, 2, "scatter_rows");
  const std::size_t c = x.shape()[1];
  if (index.size() != x.shape()[0]) throw DimensionError("scatter_rows: index/row count mismatch");
  const auto& xd = x.node()->data;
  std::vector<double> out(rows * c, 0.0);
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] >= rows) throw DimensionError("scatter_rows: target row out of range");
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(k * c), c, out.begin() + static_cast<std::ptrdiff_t>(index[k] * c));
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  auto fn = [c, idx = std::move(idx)](Node& self) {
    auto& gp = self.parents[0]->ensure_grad();
    for (std::size_t k = 0; k < idx.size(); ++k)
      for (std::size_t j = 0; j < c; ++j) gp[k * c + j] += self.grad[idx[k] * c + j];
  };
  return make_result(Shape{rows, c}, std::move(out), {x.node()}, std::move(fn));
}

Tensor straight_through(const Tensor& hard, const Tensor& soft) {
  if (hard.shape() != soft.shape()) {
    throw DimensionError("straight_through: " + shape_string(hard.shape()) + " vs " + shape_string(soft.shape()));
  }
  auto fn = [](Node& self) {
    Node& ps = *self.parents[0];
    auto& gp = ps.ensure_grad();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i];
  };
  std::vector<double> values(hard.node()->data);
  return make_result(hard.shape(), std::move(values), {soft.node()}, std::move(fn));
}

Tensor gumbel_softmax_st(const Tensor& logits, RngState& rng, const GumbelOptions& options) {
  if (!(options.temperature > 0.0)) {
    throw ParameterError("gumbel_softmax_st: temperature must be positive, got " + std::to_string(options.temperature));
  }
  if (logits.rank() == 0 || logits.shape().back() != 2) {
    throw DimensionError("gumbel_softmax_st: last axis must have size 2, got " + shape_string(logits.shape()));
  }
  std::vector<double> noise(logits.numel(), 0.0);
  if (options.noise) {
    for (auto& g : noise) g = -std::log(-std::log(rng.uniform()));
  }
  const Tensor perturbed = add(logits, Tensor(logits.shape(), std::move(noise)));
  const Tensor soft = softmax(scale(perturbed, 1.0 / options.temperature), logits.rank() - 1);
  if (!options.hard) return soft;
  const auto& sd = soft.node()->data;
  const auto& pd = perturbed.node()->data;
  std::vector<double> hard(sd.size(), 0.0);
  for (std::size_t i = 0; i < sd.size(); i += 2) {
    // Compare perturbed logits, not the soft values, so tiny temperatures
    // cannot underflow both classes to the same value.
    const std::size_t winner = pd[i] >= pd[i + 1] ? i : i + 1;
    hard[winner] = 1.0;
  }
  return straight_through(Tensor(logits.shape(), std::move(hard)), soft);
}

Tensor gumbel_softmax_st(const Tensor& logits, double temperature, RngState& rng, bool hard) {
  return gumbel_softmax_st(logits, rng, GumbelOptions{temperature, hard, true});
}

}  // namespace ctxprune

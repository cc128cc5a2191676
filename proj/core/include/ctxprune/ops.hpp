#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ctxprune/rng.hpp"
#include "ctxprune/tensor.hpp"

namespace ctxprune {

// Elementwise binary ops broadcast over equal-rank operands whose dims are
// equal or 1 (e.g. [T x D] * [T x 1], [T x D] + [1 x D]).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor square(const Tensor& x);
Tensor gelu(const Tensor& x);

/// [m x k] x [k x n].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);

/// Max-subtracted softmax along `axis`. Throws NumericError on NaN input.
Tensor softmax(const Tensor& x, std::size_t axis);

/// Row-wise softmax of a 2-D tensor where entries with allow == 0 receive
/// exactly zero probability (`allow` holds one flag per entry, row-major). A
/// row with nothing allowed yields all zeros.
Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> allow);

/// Normalizes each row of [R x C] to zero mean / unit variance, then applies
/// gamma and beta (both of C elements).
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Per-channel convolution over frames. x: [T x C], kernel: [K x C] with K
/// odd, zero padding (K-1)/2 on each side. `bias` may be undefined.
Tensor conv1d_depthwise(const Tensor& x, const Tensor& kernel, const Tensor& bias = {});

/// Mean negative log-likelihood of `targets` under row-wise softmax(logits).
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

/// Rows of `table` selected by `ids`.
Tensor embed(const Tensor& table, std::span<const int> ids);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Reduction along one axis, keeping it with size 1.
Tensor sum_axis(const Tensor& x, std::size_t axis);
/// [R x C] -> [1 x C].
Tensor mean_rows(const Tensor& x);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);

/// Rows `index` of a 2-D tensor, in order.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index);
/// Inverse of gather_rows: places row k at index[k] of a zero [rows x C] tensor.
Tensor scatter_rows(const Tensor& x, std::span<const std::size_t> index, std::size_t rows);

/// Forward value of `hard`, gradient of `soft` (shapes must match).
Tensor straight_through(const Tensor& hard, const Tensor& soft);

struct GumbelOptions {
  double temperature = 1.0;
  bool hard = true;
  /// Off gives the noiseless limit used for train/inference consistency checks.
  bool noise = true;
};

/// Two-class Gumbel-softmax over the last axis (size 2). With hard=true the
/// forward value is one-hot (ties go to class 0) and the backward pass uses
/// the Jacobian of the tempered soft sample.
Tensor gumbel_softmax_st(const Tensor& logits, RngState& rng, const GumbelOptions& options);
Tensor gumbel_softmax_st(const Tensor& logits, double temperature, RngState& rng, bool hard);

}  // namespace ctxprune

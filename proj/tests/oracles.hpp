#pragma once

// Independent reference computations shared by the unit tests and the
// acceptance suite. Nothing here calls the library code it is used to check.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ctxprune/model_types.hpp"
#include "ctxprune/rng.hpp"
#include "ctxprune/tensor.hpp"

namespace oracle {

using ctxprune::RngState;
using ctxprune::Shape;
using ctxprune::Tensor;

Tensor random_tensor(const Shape& shape, RngState& rng, double scale = 1.0, bool requires_grad = false);

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "input i[k]: analytic vs numeric"
};

/// Five-point central differences of sum(f(inputs) * R) for a fixed random R,
/// against backward(). `inputs` must be leaves with requires_grad set.
/// Relative error is |a - n| / max(|a|, |n|, floor). `max_coords` > 0 checks
/// only that many randomly chosen coordinates per input.
GradCheckResult check_gradients(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                                std::vector<Tensor> inputs, RngState& rng, double h = 1e-4,
                                std::size_t max_coords = 0, double floor = 1e-6);

/// Two-sided Mann-Whitney p by enumerating every split of the pooled sample
/// into groups of the original sizes; U from pairwise comparisons.
struct BruteForceMw {
  double u = 0.0;
  double p = 0.0;
};
BruteForceMw mann_whitney_enumerate(const std::vector<double>& a, const std::vector<double>& b);

/// Welch statistic and Welch-Satterthwaite df in long double.
struct WelchManual {
  long double t = 0.0L;
  long double df = 0.0L;
};
WelchManual welch_manual(const std::vector<double>& a, const std::vector<double>& b);

/// Hand-worked MAC counts.
struct FlopsCase {
  std::string label;
  ctxprune::ModuleKind kind;
  std::size_t t_effective;
  std::size_t memory_rows;
  std::size_t d_model;
  std::size_t d_ffn;
  std::size_t kernel;
  std::uint64_t expected;
};
const std::vector<FlopsCase>& flops_cases();

}  // namespace oracle

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "oracles.hpp"

namespace oracle {

struct OpGradReport {
  std::string op;
  std::size_t shapes = 0;
  GradCheckResult worst;
};

/// Finite-difference checks of every differentiable op (five random shapes
/// each) and of the full model loss, dense and with gated execution.
std::vector<OpGradReport> run_gradient_suite(std::uint64_t seed);

}  // namespace oracle

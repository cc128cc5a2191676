#include "ctxprune/pruning.hpp"

#include <algorithm>

#include "ctxprune/errors.hpp"
#include "ctxprune/ops.hpp"

namespace ctxprune {

namespace {

bool carries_gradient(const Tensor& mask) { return grad_enabled() && mask.requires_grad(); }

std::size_t count_kept(std::span<const std::uint8_t> keep) {
  return static_cast<std::size_t>(std::count_if(keep.begin(), keep.end(), [](std::uint8_t k) { return k != 0; }));
}

void check_mask_rows(const Tensor& x, std::size_t n, const char* what) {
  if (x.rank() != 2 || n != x.rows()) {
    throw ContractError(std::string(what) + ": gate covers " + std::to_string(n) + " positions, input is " +
                        shape_string(x.shape()));
  }
}

}  // namespace

std::size_t ExecStats::executed_count() const {
  return static_cast<std::size_t>(std::count_if(records_.begin(), records_.end(), [](const ExecRecord& r) { return r.executed; }));
}

std::vector<std::uint8_t> mask_decisions(const Tensor& mask) {
  std::vector<std::uint8_t> out(mask.numel());
  const auto d = mask.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = d[i] >= 0.5 ? 1 : 0;
  return out;
}

Tensor apply_temporal(const ModuleBody& body, const Tensor& x, std::span<const std::uint8_t> keep, ExecStats* stats,
                      const PrunableModuleSpec& spec) {
  check_mask_rows(x, keep.size(), "apply_temporal");
  std::vector<std::size_t> index;
  index.reserve(keep.size());
  for (std::size_t t = 0; t < keep.size(); ++t)
    if (keep[t]) index.push_back(t);
  if (stats) stats->record(spec, index.size(), !index.empty());
  if (index.empty()) return Tensor::zeros(x.shape());
  if (index.size() == keep.size()) return body(x, {});
  return scatter_rows(body(gather_rows(x, index), {}), index, x.rows());
}

Tensor apply_temporal(const ModuleBody& body, const Tensor& x, const Tensor& mask, ExecStats* stats,
                      const PrunableModuleSpec& spec) {
  const auto keep = mask_decisions(mask);
  if (!carries_gradient(mask)) return apply_temporal(body, x, keep, stats, spec);
  check_mask_rows(x, keep.size(), "apply_temporal");
  if (mask.rank() != 2 || mask.cols() != 1) throw ContractError("temporal mask must be [T x 1]");
  const std::size_t kept = count_kept(keep);
  if (stats) stats->record(spec, kept, kept != 0);
  return mul(body(x, keep), mask);
}

Tensor apply_utterance(const ModuleBody& body, const Tensor& x, bool keep, ExecStats* stats,
                       const PrunableModuleSpec& spec) {
  if (stats) stats->record(spec, keep ? x.rows() : 0, keep);
  if (!keep) return Tensor::zeros(x.shape());
  return body(x, {});
}

Tensor apply_utterance(const ModuleBody& body, const Tensor& x, const Tensor& mask, ExecStats* stats,
                       const PrunableModuleSpec& spec) {
  if (mask.numel() != 1) throw ContractError("utterance gate must be a single value, got " + shape_string(mask.shape()));
  const bool keep = mask.data()[0] >= 0.5;
  if (!carries_gradient(mask)) return apply_utterance(body, x, keep, stats, spec);
  if (stats) stats->record(spec, keep ? x.rows() : 0, keep);
  if (mask.rank() != 2) throw ContractError("utterance gate must be [1 x 1]");
  return mul(body(x, {}), mask);
}

Tensor apply_all_frames(const ModuleBody& body, const Tensor& x, const Tensor& mask, ExecStats* stats,
                        const PrunableModuleSpec& spec) {
  const auto keep = mask_decisions(mask);
  check_mask_rows(x, keep.size(), "apply_all_frames");
  const bool any = count_kept(keep) != 0;
  if (!any && !carries_gradient(mask)) {
    if (stats) stats->record(spec, 0, false);
    return Tensor::zeros(x.shape());
  }
  if (stats) stats->record(spec, any ? x.rows() : 0, any);
  return mul(body(x, {}), mask);
}

}  // namespace ctxprune

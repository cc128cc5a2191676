#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "ctxprune/model_types.hpp"
#include "ctxprune/tensor.hpp"

namespace ctxprune {

/// Residual-branch body of a prunable module. `key_keep` (possibly empty)
/// marks which input rows may act as attention keys; bodies without
/// self-attention ignore it.
using ModuleBody = std::function<Tensor(const Tensor& x, std::span<const std::uint8_t> key_keep)>;

struct ExecRecord {
  PrunableModuleSpec spec;
  /// Rows the module body saw logically (kept frames, T, or 0).
  std::size_t rows = 0;
  bool executed = false;
};

/// Log of module executions for one forward pass.
class ExecStats {
 public:
  void record(const PrunableModuleSpec& spec, std::size_t rows, bool executed) {
    records_.push_back({spec, rows, executed});
  }
  const std::vector<ExecRecord>& records() const { return records_; }
  std::size_t executed_count() const;
  void clear() { records_.clear(); }

 private:
  std::vector<ExecRecord> records_;
};

/// Frame-subset execution: select kept rows (order preserved), run the body
/// on that subsequence only, and zero-pad the result back to all rows. An
/// empty selection skips the body and returns zeros.
Tensor apply_temporal(const ModuleBody& body, const Tensor& x, std::span<const std::uint8_t> keep,
                      ExecStats* stats = nullptr, const PrunableModuleSpec& spec = {});

/// Gradient-carrying variant. When `mask` ([T x 1], values in {0,1}) is part
/// of a recorded graph, the body runs on all rows with non-kept rows hidden as
/// keys and the output is multiplied by the mask. Forward values equal the
/// frame-subset path; the multiplication routes a straight-through gradient to
/// every gate, including pruned ones. Otherwise falls through to the subset path.
Tensor apply_temporal(const ModuleBody& body, const Tensor& x, const Tensor& mask, ExecStats* stats = nullptr,
                      const PrunableModuleSpec& spec = {});

/// Whole-utterance gating: keep runs the body, otherwise returns zeros without
/// evaluating it.
Tensor apply_utterance(const ModuleBody& body, const Tensor& x, bool keep, ExecStats* stats = nullptr,
                       const PrunableModuleSpec& spec = {});

/// Gradient-carrying variant with a [1 x 1] mask (see apply_temporal).
Tensor apply_utterance(const ModuleBody& body, const Tensor& x, const Tensor& mask, ExecStats* stats = nullptr,
                       const PrunableModuleSpec& spec = {});

/// Per-frame gate on a module that must see every frame (cgMLP): the body
/// always runs on all T rows, and its output rows are multiplied by the mask.
/// Skipped only when every frame is pruned and no gradient is needed.
Tensor apply_all_frames(const ModuleBody& body, const Tensor& x, const Tensor& mask, ExecStats* stats = nullptr,
                        const PrunableModuleSpec& spec = {});

/// Decisions read from a mask tensor (value >= 0.5).
std::vector<std::uint8_t> mask_decisions(const Tensor& mask);

}  // namespace ctxprune

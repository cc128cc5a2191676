#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ctxprune/rng.hpp"
#include "ctxprune/tensor.hpp"

namespace ctxprune {

/// Named, ordered collection of trainable leaf tensors.
class ParamStore {
 public:
  /// Registers `value` as a trainable parameter and returns a handle to it.
  Tensor add(const std::string& name, Tensor value);
  Tensor get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t total_values() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

Tensor random_normal(Shape shape, double stddev, RngState& rng);

/// y = x W + b with W: [in x out], b: [1 x out] (optional).
struct Linear {
  Tensor weight;
  Tensor bias;

  Tensor operator()(const Tensor& x) const;
  std::size_t in_features() const { return weight.shape()[0]; }
  std::size_t out_features() const { return weight.shape()[1]; }
};

Linear make_linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, RngState& rng,
                   bool with_bias = true);

struct Norm {
  Tensor gamma;
  Tensor beta;

  Tensor operator()(const Tensor& x) const;
};

Norm make_norm(ParamStore& store, const std::string& name, std::size_t width);

struct AttentionWeights {
  Linear query, key, value, output;
};

AttentionWeights make_attention(ParamStore& store, const std::string& name, std::size_t width, RngState& rng);

struct AttentionMask {
  bool causal = false;
  /// Empty means every key is visible.
  std::span<const std::uint8_t> key_keep;
};

/// Scaled dot-product multi-head attention of `query` rows over `memory` rows.
Tensor multi_head_attention(const AttentionWeights& w, const Tensor& query, const Tensor& memory,
                            std::size_t heads, const AttentionMask& mask = {});

/// Standard sinusoidal position table [rows x width].
Tensor sinusoid_positions(std::size_t rows, std::size_t width);

}  // namespace ctxprune

#include "ctxprune/nn.hpp"

#include <cmath>

#include "ctxprune/errors.hpp"
#include "ctxprune/ops.hpp"

namespace ctxprune {

Tensor ParamStore::add(const std::string& name, Tensor value) {
  if (contains(name)) throw UsageError("parameter '" + name + "' registered twice");
  value.set_requires_grad(true);
  index_[name] = entries_.size();
  entries_.emplace_back(name, value);
  return value;
}

Tensor ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw UsageError("unknown parameter '" + name + "'");
  return entries_[it->second].second;
}

std::size_t ParamStore::total_values() const {
  std::size_t n = 0;
  for (const auto& [_, t] : entries_) n += t.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, t] : entries_) t.zero_grad();
}

Tensor random_normal(Shape shape, double stddev, RngState& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor(std::move(shape), std::move(v));
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

Linear make_linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, RngState& rng,
                   bool with_bias) {
  Linear l;
  l.weight = store.add(name + ".weight", random_normal({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng));
  if (with_bias) l.bias = store.add(name + ".bias", Tensor::zeros({1, out}));
  return l;
}

Tensor Norm::operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }

Norm make_norm(ParamStore& store, const std::string& name, std::size_t width) {
  return Norm{store.add(name + ".gamma", Tensor::full({width}, 1.0)), store.add(name + ".beta", Tensor::zeros({width}))};
}

AttentionWeights make_attention(ParamStore& store, const std::string& name, std::size_t width, RngState& rng) {
  return AttentionWeights{make_linear(store, name + ".q", width, width, rng), make_linear(store, name + ".k", width, width, rng),
                          make_linear(store, name + ".v", width, width, rng), make_linear(store, name + ".o", width, width, rng)};
}

Tensor multi_head_attention(const AttentionWeights& w, const Tensor& query, const Tensor& memory, std::size_t heads,
                            const AttentionMask& mask) {
  const std::size_t width = w.query.out_features();
  if (heads == 0 || width % heads != 0) throw ParameterError("attention width not divisible by head count");
  const std::size_t nq = query.rows(), nk = memory.rows();
  if (!mask.key_keep.empty() && mask.key_keep.size() != nk) {
    throw DimensionError("attention key mask has " + std::to_string(mask.key_keep.size()) + " entries for " +
                         std::to_string(nk) + " keys");
  }
  std::vector<std::uint8_t> allow(nq * nk, 1);
  const bool masked = mask.causal || !mask.key_keep.empty();
  if (masked) {
    for (std::size_t i = 0; i < nq; ++i)
      for (std::size_t j = 0; j < nk; ++j)
        allow[i * nk + j] = (!mask.causal || j <= i) && (mask.key_keep.empty() || mask.key_keep[j]);
  }
  const Tensor q = w.query(query);
  const Tensor k = w.key(memory);
  const Tensor v = w.value(memory);
  const std::size_t dh = width / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = slice(q, 1, h * dh, dh);
    const Tensor kh = slice(k, 1, h * dh, dh);
    const Tensor vh = slice(v, 1, h * dh, dh);
    const Tensor scores = scale(matmul(qh, transpose(kh)), inv);
    const Tensor probs = masked ? masked_softmax(scores, allow) : softmax(scores, 1);
    outs.push_back(matmul(probs, vh));
  }
  return w.output(heads == 1 ? outs[0] : concat(outs, 1));
}

Tensor sinusoid_positions(std::size_t rows, std::size_t width) {
  std::vector<double> v(rows * width);
  for (std::size_t t = 0; t < rows; ++t) {
    for (std::size_t i = 0; i < width; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(width));
      v[t * width + i] = (i % 2 == 0) ? std::sin(static_cast<double>(t) * rate) : std::cos(static_cast<double>(t) * rate);
    }
  }
  return Tensor({rows, width}, std::move(v));
}

}  // namespace ctxprune

#include <doctest.h>

#include "ctxprune/errors.hpp"
#include "ctxprune/ops.hpp"
#include "ctxprune/pruning.hpp"
#include "oracles.hpp"

using namespace ctxprune;

namespace {

// Row-coupled body: each output row also sees the mean of all input rows.
ModuleBody coupled_body(int* calls = nullptr, std::size_t* seen_rows = nullptr) {
  return [calls, seen_rows](const Tensor& x, std::span<const std::uint8_t>) {
    if (calls) ++*calls;
    if (seen_rows) *seen_rows = x.rows();
    return add(square(x), mean_rows(x));
  };
}

Tensor mask_of(std::vector<double> v, bool grad = false) {
  const std::size_t n = v.size();
  return Tensor({n, 1}, std::move(v), grad);
}

}  // namespace

TEST_CASE("temporal subset runs the body on kept rows only") {
  RngState rng(1);
  const Tensor x = oracle::random_tensor({5, 3}, rng);
  int calls = 0;
  std::size_t rows = 0;
  ExecStats stats;
  const std::vector<std::uint8_t> keep{1, 0, 1, 0, 0};
  const Tensor y = apply_temporal(coupled_body(&calls, &rows), x, keep, &stats);
  CHECK(calls == 1);
  CHECK(rows == 2);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(y.at(1, c) == 0.0);
    const double m = (x.at(0, c) + x.at(2, c)) / 2.0;
    CHECK(y.at(0, c) == doctest::Approx(x.at(0, c) * x.at(0, c) + m));
  }
  REQUIRE(stats.records().size() == 1);
  CHECK(stats.records()[0].rows == 2);
  CHECK(stats.executed_count() == 1);
}

TEST_CASE("an empty selection skips the body") {
  RngState rng(2);
  const Tensor x = oracle::random_tensor({4, 2}, rng);
  int calls = 0;
  ExecStats stats;
  const Tensor y = apply_temporal(coupled_body(&calls), x, std::vector<std::uint8_t>(4, 0), &stats);
  CHECK(calls == 0);
  for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y[i] == 0.0);
  CHECK(stats.executed_count() == 0);
  CHECK(apply_utterance(coupled_body(&calls), x, false).shape() == x.shape());
  CHECK(calls == 0);
  apply_utterance(coupled_body(&calls), x, true);
  CHECK(calls == 1);
}

TEST_CASE("keep length must match the rows") {
  RngState rng(3);
  const Tensor x = oracle::random_tensor({4, 2}, rng);
  CHECK_THROWS(apply_temporal(coupled_body(), x, std::vector<std::uint8_t>(3, 1)));
}

TEST_CASE("masked-dense path matches the subset path in value") {
  // An attention-like body that honours key_keep, so hidden rows cannot leak.
  const ModuleBody body = [](const Tensor& x, std::span<const std::uint8_t> key_keep) {
    const Tensor scores = matmul(x, transpose(x));
    if (key_keep.empty()) return matmul(softmax(scores, 1), x);
    std::vector<std::uint8_t> allow;
    for (std::size_t r = 0; r < x.rows(); ++r) allow.insert(allow.end(), key_keep.begin(), key_keep.end());
    const Tensor w = masked_softmax(scores, allow);
    return matmul(w, x);
  };
  RngState rng(4);
  for (int k = 0; k < 20; ++k) {
    const Tensor x = oracle::random_tensor({6, 3}, rng);
    std::vector<double> m(6);
    for (auto& v : m) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
    m[0] = 1.0;
    Tensor mask = mask_of(m, true);
    const Tensor dense = apply_temporal(body, x, mask);
    const Tensor subset = apply_temporal(body, x, mask_decisions(mask));
    for (std::size_t i = 0; i < dense.numel(); ++i) CHECK(dense[i] == doctest::Approx(subset[i]).epsilon(1e-12));
    // Every gate, pruned or not, receives a gradient.
    backward(sum(dense));
    REQUIRE(mask.has_grad());
  }
}

TEST_CASE("utterance mask gradient") {
  RngState rng(5);
  const Tensor x = oracle::random_tensor({3, 2}, rng);
  Tensor off = mask_of({0.0}, true);
  const Tensor y = apply_utterance(coupled_body(), x, off);
  for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y[i] == 0.0);
  backward(sum(y));
  REQUIRE(off.has_grad());
  CHECK(off.grad()[0] != 0.0);
}

TEST_CASE("all-frames gate runs on every row") {
  RngState rng(6);
  const Tensor x = oracle::random_tensor({5, 2}, rng);
  std::size_t rows = 0;
  int calls = 0;
  ExecStats stats;
  const Tensor y = apply_all_frames(coupled_body(&calls, &rows), x, mask_of({1, 0, 0, 1, 0}), &stats);
  CHECK(rows == 5);
  CHECK(stats.records()[0].rows == 5);
  CHECK(y.at(1, 0) == 0.0);
  calls = 0;
  apply_all_frames(coupled_body(&calls), x, mask_of({0, 0, 0, 0, 0}));
  CHECK(calls == 0);
}

TEST_CASE("mask decisions threshold at one half") {
  CHECK(mask_decisions(mask_of({0.0, 0.5, 1.0, 0.49})) == std::vector<std::uint8_t>{0, 1, 1, 0});
}

#include <cmath>
#include <vector>

#include "doctest.h"
#include "mma/errors.hpp"
#include "mma/grad_check.hpp"
#include "mma/nn.hpp"
#include "mma/ops.hpp"

using namespace mma;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool rg = false) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor(std::move(shape), std::move(v), rg);
}

nn::Linear identity_linear(std::size_t n) {
  Tensor w({n, n});
  for (std::size_t i = 0; i < n; ++i) w.data()[i * n + i] = 1.0;
  return {w, std::nullopt, true};
}

std::vector<Tensor> block_params(const nn::AttentionBlock& b) {
  return {b.query.weight, b.key.weight, b.value.weight, b.output.weight};
}

}  // namespace

TEST_SUITE("nn") {

TEST_CASE("single-token attention is value then output projection") {
  Rng rng(1);
  const auto block = nn::AttentionBlock::random(8, 2, true, rng);
  const Tensor x = random_tensor({1, 8}, rng);
  std::vector<double> probs;
  const Tensor out = nn::attention_forward(block, x, &probs);
  const Tensor expected = block.output.forward(block.value.forward(x));
  for (double p : probs) CHECK(p == 1.0);
  for (std::size_t i = 0; i < 8; ++i) CHECK(out.at(i) == doctest::Approx(expected.at(i)).epsilon(1e-14));
}

TEST_CASE("causal attention ignores later tokens bitwise") {
  Rng rng(2);
  const auto block = nn::AttentionBlock::random(8, 2, true, rng);
  Tensor x = random_tensor({4, 8}, rng);
  const Tensor before = nn::attention_forward(block, x);
  x.data()[3 * 8 + 5] += 0.75;
  const Tensor after = nn::attention_forward(block, x);
  for (std::size_t i = 0; i < 3 * 8; ++i) CHECK(before.at(i) == after.at(i));
  bool changed = false;
  for (std::size_t i = 3 * 8; i < 4 * 8; ++i) changed |= before.at(i) != after.at(i);
  CHECK(changed);
}

TEST_CASE("two-token single-head attention matches a straight-line reference") {
  Rng rng(3);
  const std::size_t w = 3;
  const auto block = nn::AttentionBlock::random(w, 1, false, rng);
  const Tensor x = random_tensor({2, w}, rng);
  const auto proj = [&](const nn::Linear& l, std::size_t row, std::size_t col) {
    double s = 0.0;
    for (std::size_t k = 0; k < w; ++k) s += x.at(row, k) * l.weight.at(k, col);
    return s;
  };
  double q[2][3], k[2][3], v[2][3];
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      q[r][c] = proj(block.query, r, c);
      k[r][c] = proj(block.key, r, c);
      v[r][c] = proj(block.value, r, c);
    }
  }
  const Tensor out = nn::attention_forward(block, x);
  for (std::size_t i = 0; i < 2; ++i) {
    double s[2];
    for (std::size_t j = 0; j < 2; ++j) s[j] = (q[i][0] * k[j][0] + q[i][1] * k[j][1] + q[i][2] * k[j][2]) / std::sqrt(3.0);
    const double m = std::max(s[0], s[1]);
    const double e0 = std::exp(s[0] - m), e1 = std::exp(s[1] - m);
    const double p0 = e0 / (e0 + e1), p1 = e1 / (e0 + e1);
    double mixed[3];
    for (std::size_t c = 0; c < w; ++c) mixed[c] = p0 * v[0][c] + p1 * v[1][c];
    for (std::size_t c = 0; c < w; ++c) {
      double o = 0.0;
      for (std::size_t t = 0; t < w; ++t) o += mixed[t] * block.output.weight.at(t, c);
      CHECK(std::abs(out.at(i, c) - o) < 1e-10);
    }
  }
}

TEST_CASE("attention weights sum to one per head and query") {
  Rng rng(4);
  for (bool causal : {false, true}) {
    const auto block = nn::AttentionBlock::random(16, 4, causal, rng);
    std::vector<double> probs;
    nn::attention_forward(block, random_tensor({5, 16}, rng), &probs);
    REQUIRE(probs.size() == 4 * 5 * 5);
    for (std::size_t h = 0; h < 4; ++h) {
      for (std::size_t i = 0; i < 5; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < 5; ++j) {
          const double p = probs[(h * 5 + i) * 5 + j];
          if (causal && j > i) CHECK(p == 0.0);
          sum += p;
        }
        CHECK(std::abs(sum - 1.0) < 1e-12);
      }
    }
  }
}

TEST_CASE("attention rejects width mismatch and indivisible heads") {
  Rng rng(5);
  const auto block = nn::AttentionBlock::random(8, 2, false, rng);
  CHECK_THROWS_AS(nn::attention_forward(block, random_tensor({2, 6}, rng)), ShapeMismatch);
  CHECK_THROWS_AS(nn::AttentionBlock::random(6, 4, false, rng), ShapeMismatch);
}

TEST_CASE("attention passes grad check") {
  Rng rng(6);
  for (bool causal : {false, true}) {
    auto block = nn::AttentionBlock::random(8, 2, causal, rng);
    for (nn::Linear* l : {&block.query, &block.key, &block.value, &block.output}) l->weight.set_requires_grad(true);
    const Tensor x = random_tensor({4, 8}, rng, true);
    auto params = block_params(block);
    params.push_back(x);
    const Tensor probe = random_tensor({4, 8}, rng);
    CHECK(grad_check([&] { return ops::sum(ops::mul(nn::attention_forward(block, x), probe)); }, params, 1e-5) < 1e-6);
  }
}

TEST_CASE("rms_norm examples") {
  const Tensor ones({2, 4}, std::vector<double>(8, 1.0));
  const Tensor gain({4}, std::vector<double>(4, 1.0));
  const Tensor n = nn::rms_norm(ones, gain, 1e-300);
  for (double v : n.data()) CHECK(v == doctest::Approx(1.0).epsilon(1e-15));

  const Tensor g2({2}, {1.0, 1.0});
  const Tensor r = nn::rms_norm(Tensor({1, 2}, {3.0, 4.0}), g2, 0.0);
  CHECK(r.at(0) == doctest::Approx(3.0 / std::sqrt(12.5)).epsilon(1e-15));
  CHECK(r.at(1) == doctest::Approx(4.0 / std::sqrt(12.5)).epsilon(1e-15));
  CHECK(r.at(0) == doctest::Approx(0.848528).epsilon(1e-6));
  CHECK(r.at(1) == doctest::Approx(1.131371).epsilon(1e-6));

  Rng rng(7);
  const Tensor x = random_tensor({3, 5}, rng);
  const Tensor g = random_tensor({5}, rng);
  const Tensor a = nn::rms_norm(x, g, 0.0);
  const Tensor b = nn::rms_norm(ops::scale(x, 2.0), g, 0.0);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.at(i) == doctest::Approx(b.at(i)).epsilon(1e-15));
  CHECK_THROWS_AS(nn::rms_norm(x, Tensor({4}), 1e-6), ShapeMismatch);
}

TEST_CASE("swiglu examples") {
  Rng rng(8);
  const auto ffn = nn::SwiGLUFeedForward::random(6, 12, rng);
  const Tensor zero = nn::swiglu_forward(ffn, Tensor({2, 6}));
  for (double v : zero.data()) CHECK(v == 0.0);

  const nn::SwiGLUFeedForward id{identity_linear(1), identity_linear(1), identity_linear(1)};
  // silu(1) * 1 with identity projections.
  const Tensor y = nn::swiglu_forward(id, Tensor({1, 1}, std::vector<double>{1.0}));
  CHECK(y.item() == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-15));
  CHECK(y.item() == doctest::Approx(0.731059).epsilon(1e-6));
  CHECK_THROWS_AS(nn::swiglu_forward(ffn, Tensor({2, 5})), ShapeMismatch);
}

TEST_CASE("swiglu passes grad check") {
  Rng rng(9);
  auto ffn = nn::SwiGLUFeedForward::random(5, 7, rng);
  for (nn::Linear* l : {&ffn.gate, &ffn.up, &ffn.down}) l->weight.set_requires_grad(true);
  const Tensor x = random_tensor({3, 5}, rng, true);
  const std::vector<Tensor> params{ffn.gate.weight, ffn.up.weight, ffn.down.weight, x};
  CHECK(grad_check([&] { return ops::sum(ops::exp(nn::swiglu_forward(ffn, x))); }, params, 1e-5) < 1e-6);
}

TEST_CASE("embed_tokens gathers rows and scatter-adds gradients") {
  Tensor table({4, 3}, {0, 1, 2, 10, 11, 12, 20, 21, 22, 30, 31, 32}, true);
  const std::vector<int> one{0};
  const Tensor row = nn::embed_tokens(table, one);
  CHECK(row.shape() == Shape{1, 3});
  CHECK(row.at(2) == 2.0);

  const std::vector<int> ids{2, 1, 2};
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = ops::sum(nn::embed_tokens(table, ids));
  }
  tape.backward(loss);
  const std::vector<double> expected{0, 0, 0, 1, 1, 1, 2, 2, 2, 0, 0, 0};
  for (std::size_t i = 0; i < 12; ++i) CHECK(table.grad()[i] == expected[i]);

  const std::vector<int> oob{4};
  CHECK_THROWS_AS(nn::embed_tokens(table, oob), TokenOutOfRange);
  const std::vector<int> neg{-1};
  CHECK_THROWS_AS(nn::embed_tokens(table, neg), TokenOutOfRange);
}

TEST_CASE("frozen linear layers carry no gradient") {
  Rng rng(10);
  const auto frozen = nn::Linear::random(4, 3, true, true, rng);
  const auto live = nn::Linear::random(3, 2, true, false, rng);
  CHECK_FALSE(frozen.weight.requires_grad());
  CHECK_FALSE(frozen.bias->requires_grad());
  CHECK(live.weight.requires_grad());
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = ops::sum(live.forward(frozen.forward(random_tensor({2, 4}, rng))));
  }
  tape.backward(loss);
  CHECK_FALSE(frozen.weight.has_grad());
  CHECK(live.weight.has_grad());
}

TEST_CASE("transformer block: hook sees the block input and the block passes grad check") {
  Rng rng(11);
  const auto block = nn::TransformerBlock::random(8, 2, 16, true, rng);
  const Tensor x = random_tensor({3, 8}, rng, true);
  Tensor seen;
  block.forward(x, [&](const Tensor& in) {
    seen = in;
    return in;
  });
  CHECK(seen.same_storage(x));
  const std::vector<Tensor> params{x};
  CHECK(grad_check([&] { return ops::mean(ops::exp(block.forward(x))); }, params, 1e-5) < 1e-6);
}

}

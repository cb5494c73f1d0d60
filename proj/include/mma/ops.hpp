#pragma once
// Differentiable tensor ops. Each records a backward rule on the active tape
// when any input requires a gradient. No implicit broadcasting apart from
// scalar-with-tensor in add/sub/mul and the explicit add_bias.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "mma/tensor.hpp"

namespace mma::ops {

Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]x[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k]x[n,k]^T
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_bias(const Tensor& x, const Tensor& bias);  // [n,m] + [m] per row

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);

// Row gather; backward scatter-adds into the gathered rows only.
Tensor gather_rows(const Tensor& table, std::span<const int> ids);

enum class SoftmaxMask { None, Causal };

// Along the last axis, with max subtraction. Causal masks column j > row i.
Tensor softmax(const Tensor& x, double temperature, SoftmaxMask mask = SoftmaxMask::None);

// Fused multi-head scaled dot-product attention over [len, width] q/k/v,
// returning the concatenated head outputs. When `probs` is given it receives
// the [heads, len, len] attention weights.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 bool causal, std::vector<double>* probs = nullptr);

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps);

// Mean over mask-true rows of -log softmax(logits)[row, target].
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const std::uint8_t> mask);

}  // namespace mma::ops

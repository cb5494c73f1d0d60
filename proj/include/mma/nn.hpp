#pragma once
// Transformer building blocks shared by the image encoder and the language model.

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mma/grad_check.hpp"
#include "mma/random.hpp"
#include "mma/tensor.hpp"

namespace mma::nn {

struct Linear {
  Tensor weight;               // [in, out]
  std::optional<Tensor> bias;  // [out]
  bool frozen = true;

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
  Tensor forward(const Tensor& x) const;

  // weight ~ N(0, 1/in); bias zero. Frozen layers never require a gradient.
  static Linear random(std::size_t in, std::size_t out, bool with_bias, bool frozen, Rng& rng);
};

struct AttentionBlock {
  Linear query, key, value, output;
  std::size_t head_count = 1;
  bool causal = false;

  std::size_t width() const { return query.in_features(); }
  static AttentionBlock random(std::size_t width, std::size_t heads, bool causal, Rng& rng);
};

// Multi-head scaled dot-product attention; `probs` optionally receives the
// [heads, len, len] weights.
Tensor attention_forward(const AttentionBlock& block, const Tensor& x,
                         std::vector<double>* probs = nullptr);

struct SwiGLUFeedForward {
  Linear gate, up, down;
  static SwiGLUFeedForward random(std::size_t width, std::size_t hidden, Rng& rng);
};

// down(silu(gate(x)) * up(x))
Tensor swiglu_forward(const SwiGLUFeedForward& ffn, const Tensor& x);

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps);

Tensor embed_tokens(const Tensor& table, std::span<const int> ids);

/// Pre-norm block: x + attn(norm(x')) with x' = pre_attention(x), then + ffn(norm(.)).
struct TransformerBlock {
  Tensor attn_gain;
  Tensor ffn_gain;
  AttentionBlock attention;
  SwiGLUFeedForward ffn;
  double norm_eps = 1e-6;

  static TransformerBlock random(std::size_t width, std::size_t heads, std::size_t ffn_hidden,
                                 bool causal, Rng& rng);

  using Hook = std::function<Tensor(const Tensor&)>;
  Tensor forward(const Tensor& x, const Hook& pre_attention = {}) const;

  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

}  // namespace mma::nn

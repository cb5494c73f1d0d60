#include "mma/nn.hpp"

#include <cmath>

#include "mma/errors.hpp"
#include "mma/ops.hpp"

namespace mma::nn {

Tensor Linear::forward(const Tensor& x) const {
  if (x.cols() != in_features()) {
    throw ShapeMismatch("linear: input " + shape_str(x.shape()) + " for weight " +
                        shape_str(weight.shape()));
  }
  Tensor y = ops::matmul(x, weight);
  return bias ? ops::add_bias(y, *bias) : y;
}

Linear Linear::random(std::size_t in, std::size_t out, bool with_bias, bool frozen, Rng& rng) {
  const double std = 1.0 / std::sqrt(static_cast<double>(in));
  std::vector<double> w(in * out);
  for (double& v : w) v = rng.normal(0.0, std);
  Linear layer{Tensor({in, out}, std::move(w), !frozen), std::nullopt, frozen};
  if (with_bias) layer.bias = Tensor({out}, !frozen);
  return layer;
}

AttentionBlock AttentionBlock::random(std::size_t width, std::size_t heads, bool causal,
                                      Rng& rng) {
  if (heads == 0 || width % heads != 0) {
    throw ShapeMismatch("width " + std::to_string(width) + " not divisible by " +
                        std::to_string(heads) + " heads");
  }
  AttentionBlock block;
  block.query = Linear::random(width, width, false, true, rng);
  block.key = Linear::random(width, width, false, true, rng);
  block.value = Linear::random(width, width, false, true, rng);
  block.output = Linear::random(width, width, false, true, rng);
  block.head_count = heads;
  block.causal = causal;
  return block;
}

Tensor attention_forward(const AttentionBlock& block, const Tensor& x, std::vector<double>* probs) {
  if (x.rank() != 2 || x.cols() != block.width()) {
    throw ShapeMismatch("attention: input " + shape_str(x.shape()) + " for width " +
                        std::to_string(block.width()));
  }
  const Tensor q = block.query.forward(x);
  const Tensor k = block.key.forward(x);
  const Tensor v = block.value.forward(x);
  const Tensor mixed = ops::attention(q, k, v, block.head_count, block.causal, probs);
  return block.output.forward(mixed);
}

SwiGLUFeedForward SwiGLUFeedForward::random(std::size_t width, std::size_t hidden, Rng& rng) {
  SwiGLUFeedForward ffn;
  ffn.gate = Linear::random(width, hidden, false, true, rng);
  ffn.up = Linear::random(width, hidden, false, true, rng);
  ffn.down = Linear::random(hidden, width, false, true, rng);
  return ffn;
}

Tensor swiglu_forward(const SwiGLUFeedForward& ffn, const Tensor& x) {
  const Tensor gated = ops::mul(ops::silu(ffn.gate.forward(x)), ffn.up.forward(x));
  return ffn.down.forward(gated);
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
  return ops::rms_norm(x, gain, eps);
}

Tensor embed_tokens(const Tensor& table, std::span<const int> ids) {
  return ops::gather_rows(table, ids);
}

TransformerBlock TransformerBlock::random(std::size_t width, std::size_t heads,
                                          std::size_t ffn_hidden, bool causal, Rng& rng) {
  TransformerBlock block;
  block.attn_gain = Tensor({width}, std::vector<double>(width, 1.0));
  block.ffn_gain = Tensor({width}, std::vector<double>(width, 1.0));
  block.attention = AttentionBlock::random(width, heads, causal, rng);
  block.ffn = SwiGLUFeedForward::random(width, ffn_hidden, rng);
  return block;
}

Tensor TransformerBlock::forward(const Tensor& x, const Hook& pre_attention) const {
  const Tensor adapted = pre_attention ? pre_attention(x) : x;
  const Tensor h =
      ops::add(adapted, attention_forward(attention, rms_norm(adapted, attn_gain, norm_eps)));
  return ops::add(h, swiglu_forward(ffn, rms_norm(h, ffn_gain, norm_eps)));
}

void TransformerBlock::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({prefix + "attn_norm.gain", attn_gain});
  out.push_back({prefix + "attn.query", attention.query.weight});
  out.push_back({prefix + "attn.key", attention.key.weight});
  out.push_back({prefix + "attn.value", attention.value.weight});
  out.push_back({prefix + "attn.output", attention.output.weight});
  out.push_back({prefix + "ffn_norm.gain", ffn_gain});
  out.push_back({prefix + "ffn.gate", ffn.gate.weight});
  out.push_back({prefix + "ffn.up", ffn.up.weight});
  out.push_back({prefix + "ffn.down", ffn.down.weight});
}

}  // namespace mma::nn

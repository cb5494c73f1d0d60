#pragma once
// Frozen mini image encoder + visual neck + frozen mini causal LM, bridged by
// trainable adapters and a modality token.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mma/adapters.hpp"
#include "mma/data.hpp"
#include "mma/grad_check.hpp"
#include "mma/nn.hpp"
#include "mma/random.hpp"
#include "mma/tensor.hpp"

namespace mma {

struct ModelConfig {
  std::size_t vocab = 64;
  std::size_t width = 64;  // LLM width c
  std::size_t llm_layers = 4;
  std::size_t llm_heads = 16;
  std::size_t llm_ffn_hidden = 256;
  std::size_t max_seq_len = 48;
  std::size_t vit_layers = 12;  // P
  std::size_t cls_stride = 2;   // k: a [cls] tap after every k-th block
  std::size_t vit_width = 32;   // d
  std::size_t vit_heads = 8;
  std::size_t vit_ffn_hidden = 128;
  std::size_t grid_size = 4;
  std::size_t neck_hidden = 16;  // d_h
  std::size_t adapter_rank = 8;  // r
  double tau = 10.0;
  double scale = 1.0;
  bool mm_adapter_in_encoder = false;
  double norm_eps = 1e-6;
  std::uint64_t seed = 1;

  std::size_t visual_tokens() const { return vit_layers / cls_stride; }
  void validate() const;
};

struct MiniViT {
  Tensor patch_embedding;     // [colors, d]
  Tensor position_embedding;  // [1 + patches, d]
  Tensor cls_token;           // [1, d]
  std::vector<nn::TransformerBlock> blocks;
  std::vector<PlainAdapter> adapters;   // one per block, unless mm_adapters is used
  std::vector<MMAdapter> mm_adapters;   // one per block when MM-Adapters sit in the encoder
  std::size_t cls_stride = 2;
  std::size_t patch_count = 16;
};

struct VisualNeck {
  Tensor w_down;  // [d, d_h]
  Tensor b_down;  // [d_h]
  Tensor w_up;    // [d_h, c]
  Tensor b_up;    // [c]
};

struct MiniLLM {
  Tensor token_embedding;     // [vocab, c], also the output head
  Tensor position_embedding;  // [max_len, c]
  std::vector<nn::TransformerBlock> blocks;
  std::vector<MMAdapter> adapters;  // one per block, applied before attention
  Tensor final_gain;                // [c]
};

struct MultimodalModel {
  ModelConfig config;
  MiniViT vit;
  VisualNeck neck;
  MiniLLM llm;
  ModalityEmbedding modality;

  // Backbone from derive_seed(seed, 1), adapters from derive_seed(seed, 2).
  explicit MultimodalModel(const ModelConfig& cfg);

  // theta_a, in a fixed order: modality embedding, encoder adapters, neck, LLM adapters.
  std::vector<NamedTensor> trainable_parameters() const;
  // theta_l; the tied output head is listed once.
  std::vector<NamedTensor> frozen_parameters() const;
};

Tensor vit_encode(const MultimodalModel& model, std::span<const int> patches);

Tensor visual_neck_forward(const VisualNeck& neck, const Tensor& x);

struct InputLayout {
  std::size_t visual_begin = 1;
  std::size_t visual_count = 0;
  std::size_t text_begin = 1;
  std::size_t text_count = 0;
  std::size_t length() const { return text_begin + text_count; }
};

struct AssembledInput {
  Tensor z;    // [len, c]: t_m | X' | Y
  Tensor t_m;  // [1, c]
  ModalityTag modality = ModalityTag::TextOnly;
  InputLayout layout;
};

AssembledInput assemble_input(ModalityTag tag, const Tensor& t_m,
                              const std::optional<Tensor>& visual, const Tensor& text);

// t_m, the encoded image (if any) and the embedded instruction.
AssembledInput assemble_example(const MultimodalModel& model, const data::InstructionExample& ex);

enum class AdapterMode { Dynamic, Merged, Disabled };

struct ForwardOptions {
  AdapterMode mode = AdapterMode::Dynamic;
  const std::vector<MergedAdapter>* merged = nullptr;  // one per LLM block for Merged
};

// Next-token logits [len(Z) + len(response), vocab].
Tensor forward_logits(const MultimodalModel& model, const AssembledInput& input,
                      std::span<const int> response_ids, const ForwardOptions& options = {});

// Per-layer routing pairs for both modalities.
struct RoutingRow {
  std::array<double, 2> text_only;
  std::array<double, 2> text_image;
};
std::vector<RoutingRow> routing_table(const MultimodalModel& model);

std::vector<MergedAdapter> merge_model(const MultimodalModel& model, ModalityTag tag);

std::vector<int> generate_greedy(const MultimodalModel& model, const AssembledInput& input,
                                 std::size_t max_tokens, const ForwardOptions& options = {});

std::vector<int> generate_top_p(const MultimodalModel& model, const AssembledInput& input,
                                std::size_t max_tokens, double temperature, double top_p,
                                std::uint64_t seed);

struct ParameterReport {
  std::size_t trainable_count = 0;
  std::size_t frozen_count = 0;
  double ratio = 0.0;  // trainable / (trainable + frozen)
};

ParameterReport parameter_report(const MultimodalModel& model);

}  // namespace mma

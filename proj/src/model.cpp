#include "mma/model.hpp"

#include <cmath>
#include <numeric>

#include "mma/errors.hpp"
#include "mma/ops.hpp"
#include "mma/sampling.hpp"

namespace mma {

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw DomainError("model config: " + what);
  };
  require(vocab >= data::Vocabulary::instance().size(), "vocab smaller than the symbol table");
  require(width > 0 && vit_width > 0 && neck_hidden > 0 && adapter_rank > 0, "zero width");
  require(llm_layers > 0 && vit_layers > 0, "zero depth");
  require(llm_heads > 0 && width % llm_heads == 0, "width not divisible by llm_heads");
  require(vit_heads > 0 && vit_width % vit_heads == 0, "vit_width not divisible by vit_heads");
  require(cls_stride > 0 && cls_stride <= vit_layers, "cls_stride must lie in [1, vit_layers]");
  require(grid_size > 0 && grid_size <= 10, "grid_size must lie in [1, 10]");
  require(tau > 0.0, "tau must be positive");
  require(max_seq_len > 1, "max_seq_len too small");
}

namespace {

Tensor normal_table(std::size_t rows, std::size_t cols, double std, bool trainable, Rng& rng) {
  std::vector<double> values(rows * cols);
  for (double& v : values) v = rng.normal(0.0, std);
  return Tensor({rows, cols}, std::move(values), trainable);
}

Tensor ones(std::size_t n) { return Tensor({n}, std::vector<double>(n, 1.0)); }

std::vector<int> iota_ids(std::size_t n) {
  std::vector<int> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  return ids;
}

}  // namespace

MultimodalModel::MultimodalModel(const ModelConfig& cfg) : config(cfg) {
  cfg.validate();
  Rng backbone(derive_seed(cfg.seed, 1));
  Rng adapters(derive_seed(cfg.seed, 2));

  const std::size_t patches = cfg.grid_size * cfg.grid_size;
  vit.patch_embedding = normal_table(data::kColorCount, cfg.vit_width, 1.0, false, backbone);
  vit.position_embedding = normal_table(1 + patches, cfg.vit_width, 1.0, false, backbone);
  vit.cls_token = normal_table(1, cfg.vit_width, 1.0, false, backbone);
  vit.cls_stride = cfg.cls_stride;
  vit.patch_count = patches;
  for (std::size_t i = 0; i < cfg.vit_layers; ++i) {
    vit.blocks.push_back(nn::TransformerBlock::random(cfg.vit_width, cfg.vit_heads,
                                                      cfg.vit_ffn_hidden, false, backbone));
    vit.blocks.back().norm_eps = cfg.norm_eps;
  }

  llm.token_embedding = normal_table(cfg.vocab, cfg.width, 1.0, false, backbone);
  llm.position_embedding = normal_table(cfg.max_seq_len, cfg.width, 1.0, false, backbone);
  for (std::size_t i = 0; i < cfg.llm_layers; ++i) {
    llm.blocks.push_back(nn::TransformerBlock::random(cfg.width, cfg.llm_heads,
                                                      cfg.llm_ffn_hidden, true, backbone));
    llm.blocks.back().norm_eps = cfg.norm_eps;
  }
  llm.final_gain = ones(cfg.width);

  modality = ModalityEmbedding::init(cfg.width, adapters);
  for (std::size_t i = 0; i < cfg.vit_layers; ++i) {
    if (cfg.mm_adapter_in_encoder) {
      vit.mm_adapters.push_back(MMAdapter::init(cfg.vit_width, cfg.adapter_rank, cfg.tau,
                                                cfg.scale, adapters, cfg.width));
    } else {
      vit.adapters.push_back(
          PlainAdapter::init(cfg.vit_width, cfg.adapter_rank, cfg.scale, adapters));
    }
  }
  neck.w_down = normal_table(cfg.vit_width, cfg.neck_hidden,
                             1.0 / std::sqrt(static_cast<double>(cfg.vit_width)), true, adapters);
  neck.b_down = Tensor({cfg.neck_hidden}, true);
  neck.w_up = normal_table(cfg.neck_hidden, cfg.width,
                           1.0 / std::sqrt(static_cast<double>(cfg.neck_hidden)), true, adapters);
  neck.b_up = Tensor({cfg.width}, true);
  for (std::size_t i = 0; i < cfg.llm_layers; ++i) {
    llm.adapters.push_back(
        MMAdapter::init(cfg.width, cfg.adapter_rank, cfg.tau, cfg.scale, adapters));
  }
}

std::vector<NamedTensor> MultimodalModel::trainable_parameters() const {
  std::vector<NamedTensor> out;
  out.push_back({"modality_embedding", modality.table});
  for (std::size_t i = 0; i < vit.adapters.size(); ++i) {
    vit.adapters[i].collect("vit.blocks." + std::to_string(i) + ".adapter.", out);
  }
  for (std::size_t i = 0; i < vit.mm_adapters.size(); ++i) {
    vit.mm_adapters[i].collect("vit.blocks." + std::to_string(i) + ".mm_adapter.", out);
  }
  out.push_back({"neck.w_down", neck.w_down});
  out.push_back({"neck.b_down", neck.b_down});
  out.push_back({"neck.w_up", neck.w_up});
  out.push_back({"neck.b_up", neck.b_up});
  for (std::size_t i = 0; i < llm.adapters.size(); ++i) {
    llm.adapters[i].collect("llm.blocks." + std::to_string(i) + ".mm_adapter.", out);
  }
  return out;
}

std::vector<NamedTensor> MultimodalModel::frozen_parameters() const {
  std::vector<NamedTensor> out;
  out.push_back({"vit.patch_embedding", vit.patch_embedding});
  out.push_back({"vit.position_embedding", vit.position_embedding});
  out.push_back({"vit.cls_token", vit.cls_token});
  for (std::size_t i = 0; i < vit.blocks.size(); ++i) {
    vit.blocks[i].collect("vit.blocks." + std::to_string(i) + ".", out);
  }
  out.push_back({"llm.token_embedding", llm.token_embedding});
  out.push_back({"llm.position_embedding", llm.position_embedding});
  for (std::size_t i = 0; i < llm.blocks.size(); ++i) {
    llm.blocks[i].collect("llm.blocks." + std::to_string(i) + ".", out);
  }
  out.push_back({"llm.final_norm.gain", llm.final_gain});
  return out;
}

Tensor vit_encode(const MultimodalModel& model, std::span<const int> patches) {
  const MiniViT& vit = model.vit;
  if (patches.size() != vit.patch_count) {
    throw ShapeMismatch("encoder expects " + std::to_string(vit.patch_count) + " patches, got " +
                        std::to_string(patches.size()));
  }
  const std::vector<Tensor> parts{vit.cls_token, ops::gather_rows(vit.patch_embedding, patches)};
  Tensor x = ops::add(ops::concat_rows(parts), vit.position_embedding);

  std::optional<Tensor> t_m;
  if (!vit.mm_adapters.empty()) t_m = modality_token(ModalityTag::TextImage, model.modality);

  std::vector<Tensor> taps;
  for (std::size_t i = 0; i < vit.blocks.size(); ++i) {
    nn::TransformerBlock::Hook hook;
    if (!vit.mm_adapters.empty()) {
      hook = [&, i](const Tensor& z) { return mm_adapter_forward(vit.mm_adapters[i], z, *t_m); };
    } else {
      hook = [&, i](const Tensor& z) { return plain_adapter_forward(vit.adapters[i], z); };
    }
    x = vit.blocks[i].forward(x, hook);
    if ((i + 1) % vit.cls_stride == 0) taps.push_back(ops::slice_rows(x, 0, 1));
  }
  return ops::concat_rows(taps);
}

Tensor visual_neck_forward(const VisualNeck& neck, const Tensor& x) {
  if (x.rank() != 2 || x.cols() != neck.w_down.dim(0)) {
    throw ShapeMismatch("visual neck: input " + shape_str(x.shape()) + " for W_d " +
                        shape_str(neck.w_down.shape()));
  }
  const Tensor hidden = ops::silu(ops::add_bias(ops::matmul(x, neck.w_down), neck.b_down));
  return ops::add_bias(ops::matmul(hidden, neck.w_up), neck.b_up);
}

AssembledInput assemble_input(ModalityTag tag, const Tensor& t_m,
                              const std::optional<Tensor>& visual, const Tensor& text) {
  if ((tag == ModalityTag::TextImage) != visual.has_value()) {
    throw ModalityMismatch(std::string("visual features ") +
                           (visual ? "given for a text-only" : "missing for a text-image") +
                           " input");
  }
  const std::size_t c = t_m.numel();
  if (text.rank() != 2 || text.cols() != c || (visual && visual->cols() != c)) {
    throw ShapeMismatch("assemble_input: segment widths differ from t_m width " +
                        std::to_string(c));
  }
  AssembledInput input;
  input.t_m = t_m.rank() == 2 ? t_m : ops::reshape(t_m, {1, c});
  input.modality = tag;
  std::vector<Tensor> parts{input.t_m};
  if (visual) {
    parts.push_back(*visual);
    input.layout.visual_count = visual->rows();
  }
  parts.push_back(text);
  input.layout.visual_begin = 1;
  input.layout.text_begin = 1 + input.layout.visual_count;
  input.layout.text_count = text.rows();
  input.z = ops::concat_rows(parts);
  return input;
}

AssembledInput assemble_example(const MultimodalModel& model, const data::InstructionExample& ex) {
  const Tensor t_m = modality_token(ex.modality, model.modality);
  std::optional<Tensor> visual;
  if (ex.image) visual = visual_neck_forward(model.neck, vit_encode(model, ex.image->patch_tokens()));
  const Tensor text = nn::embed_tokens(model.llm.token_embedding, ex.instruction);
  return assemble_input(ex.modality, t_m, visual, text);
}

Tensor forward_logits(const MultimodalModel& model, const AssembledInput& input,
                      std::span<const int> response_ids, const ForwardOptions& options) {
  const MiniLLM& llm = model.llm;
  Tensor x = input.z;
  if (!response_ids.empty()) {
    const std::vector<Tensor> parts{x, nn::embed_tokens(llm.token_embedding, response_ids)};
    x = ops::concat_rows(parts);
  }
  const std::size_t len = x.rows();
  if (len > model.config.max_seq_len) {
    throw ShapeMismatch("sequence of " + std::to_string(len) + " exceeds max_seq_len " +
                        std::to_string(model.config.max_seq_len));
  }
  const std::vector<int> positions = iota_ids(len);
  x = ops::add(x, ops::gather_rows(llm.position_embedding, positions));

  if (options.mode == AdapterMode::Merged &&
      (options.merged == nullptr || options.merged->size() != llm.blocks.size())) {
    throw ShapeMismatch("merged forward needs one merged adapter per block");
  }
  for (std::size_t i = 0; i < llm.blocks.size(); ++i) {
    nn::TransformerBlock::Hook hook;
    switch (options.mode) {
      case AdapterMode::Dynamic: {
        const Tensor w = routing_weights(input.t_m, llm.adapters[i].router);
        hook = [&, i, w](const Tensor& z) { return mm_adapter_apply(llm.adapters[i], z, w); };
        break;
      }
      case AdapterMode::Merged:
        hook = [&, i](const Tensor& z) { return (*options.merged)[i].apply(z); };
        break;
      case AdapterMode::Disabled:
        break;
    }
    x = llm.blocks[i].forward(x, hook);
  }
  const Tensor h = ops::rms_norm(x, llm.final_gain, model.config.norm_eps);
  return ops::matmul_nt(h, llm.token_embedding);
}

std::vector<RoutingRow> routing_table(const MultimodalModel& model) {
  NoGradScope no_grad;
  const Tensor text = modality_token(ModalityTag::TextOnly, model.modality);
  const Tensor image = modality_token(ModalityTag::TextImage, model.modality);
  std::vector<RoutingRow> rows;
  for (const MMAdapter& adapter : model.llm.adapters) {
    const Tensor wt = routing_weights(text, adapter.router);
    const Tensor wi = routing_weights(image, adapter.router);
    rows.push_back({{wt.at(0), wt.at(1)}, {wi.at(0), wi.at(1)}});
  }
  return rows;
}

std::vector<MergedAdapter> merge_model(const MultimodalModel& model, ModalityTag tag) {
  std::vector<MergedAdapter> merged;
  for (const MMAdapter& adapter : model.llm.adapters) {
    merged.push_back(merge_for_modality(adapter, tag, model.modality));
  }
  return merged;
}

namespace {

std::span<const double> last_row(const Tensor& logits) {
  const std::size_t v = logits.cols();
  return logits.data().subspan((logits.rows() - 1) * v, v);
}

}  // namespace

std::vector<int> generate_greedy(const MultimodalModel& model, const AssembledInput& input,
                                 std::size_t max_tokens, const ForwardOptions& options) {
  NoGradScope no_grad;
  std::vector<int> out;
  while (out.size() < max_tokens) {
    const Tensor logits = forward_logits(model, input, out, options);
    const int next = sampling::argmax(last_row(logits));
    out.push_back(next);
    if (next == data::kEos) break;
  }
  return out;
}

std::vector<int> generate_top_p(const MultimodalModel& model, const AssembledInput& input,
                                std::size_t max_tokens, double temperature, double top_p,
                                std::uint64_t seed) {
  if (!(temperature > 0.0)) throw DomainError("temperature must be positive");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw DomainError("top_p must lie in (0, 1]");
  NoGradScope no_grad;
  Rng rng(seed);
  std::vector<int> out;
  while (out.size() < max_tokens) {
    const Tensor logits = forward_logits(model, input, out);
    const int next = sampling::sample_top_p(last_row(logits), temperature, top_p, rng);
    out.push_back(next);
    if (next == data::kEos) break;
  }
  return out;
}

ParameterReport parameter_report(const MultimodalModel& model) {
  ParameterReport report;
  auto all = model.frozen_parameters();
  for (auto& t : model.trainable_parameters()) all.push_back(std::move(t));
  for (const NamedTensor& t : all) {
    (t.tensor.requires_grad() ? report.trainable_count : report.frozen_count) += t.tensor.numel();
  }
  const double total = static_cast<double>(report.trainable_count + report.frozen_count);
  report.ratio = total > 0.0 ? static_cast<double>(report.trainable_count) / total : 0.0;
  return report;
}

}  // namespace mma

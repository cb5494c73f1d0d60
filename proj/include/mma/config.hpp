#pragma once
// Run configuration: a flat `key = value` file. Every key has a default,
// unknown keys are rejected, `#` starts a comment.

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

#include "mma/model.hpp"
#include "mma/training.hpp"

namespace mma {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  std::size_t text_train = 2000;
  std::size_t image_train = 2000;
  std::size_t text_eval = 400;
  std::size_t image_eval = 400;

  std::size_t max_new_tokens = 4;
  std::size_t eval_every = 5;  // epochs between eval records, 0 = final only
  double gen_temperature = 0.1;
  double gen_top_p = 0.75;
  std::string kernels = "auto";

  std::string out_dir = "run";
  std::string checkpoint_file = "adapter.ckpt";
  std::string metrics_file = "metrics.jsonl";

  std::uint64_t seed = 1;  // seeds model, data and batching

  static RunConfig parse(std::string_view text);
  static RunConfig load(const std::string& path);

  // One `key = value` line per key in a fixed order; parse(to_text()) round-trips.
  std::string to_text() const;

  // Propagates `seed` into the model and trainer and validates both.
  void finalize();

  std::string checkpoint_path() const;
  std::string metrics_path() const;

  template <class F>
  void visit(F&& f);
};

template <class F>
void RunConfig::visit(F&& f) {
  f("vocab", model.vocab);
  f("c", model.width);
  f("L", model.llm_layers);
  f("llm_heads", model.llm_heads);
  f("llm_ffn_hidden", model.llm_ffn_hidden);
  f("max_seq_len", model.max_seq_len);
  f("P", model.vit_layers);
  f("k", model.cls_stride);
  f("d", model.vit_width);
  f("vit_heads", model.vit_heads);
  f("vit_ffn_hidden", model.vit_ffn_hidden);
  f("grid_size", model.grid_size);
  f("d_h", model.neck_hidden);
  f("r", model.adapter_rank);
  f("tau", model.tau);
  f("scale_s", model.scale);
  f("mm_adapter_in_encoder", model.mm_adapter_in_encoder);
  f("norm_eps", model.norm_eps);
  f("batch_size", train.batch_size);
  f("lr_max", train.lr_max);
  f("lr_min", train.lr_min);
  f("weight_decay", train.weight_decay);
  f("epochs", train.epochs);
  f("beta1", train.beta1);
  f("beta2", train.beta2);
  f("adam_eps", train.adam_eps);
  f("mix_ratio", train.mix_ratio);
  f("grad_clip", train.grad_clip);
  f("warmup_steps", train.warmup_steps);
  f("text_train", text_train);
  f("image_train", image_train);
  f("text_eval", text_eval);
  f("image_eval", image_eval);
  f("max_new_tokens", max_new_tokens);
  f("eval_every", eval_every);
  f("gen_temperature", gen_temperature);
  f("gen_top_p", gen_top_p);
  f("kernels", kernels);
  f("out_dir", out_dir);
  f("checkpoint_file", checkpoint_file);
  f("metrics_file", metrics_file);
  f("seed", seed);
}

}  // namespace mma

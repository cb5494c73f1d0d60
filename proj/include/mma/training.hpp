#pragma once
// Mixed-modality training of the adaptation parameters only.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "mma/data.hpp"
#include "mma/model.hpp"
#include "mma/random.hpp"
#include "mma/tensor.hpp"

namespace mma {

struct TrainConfig {
  std::size_t batch_size = 32;
  double lr_max = 9e-3;
  double lr_min = 0.0;
  double weight_decay = 0.02;
  std::size_t epochs = 20;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double mix_ratio = 0.5;  // fraction of text-image examples per batch
  double grad_clip = 0.0;  // global-norm clip, 0 = off
  std::size_t warmup_steps = 0;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Teacher-forced layout of one example: the response minus its last token is
/// appended to Z; rows len(Z)-1 .. end predict R_1 .. R_{S+1}.
struct LabelledSequence {
  std::vector<int> response_inputs;
  std::vector<int> targets;  // one per logit row
  std::vector<std::uint8_t> mask;  // 1 exactly on response rows
};

LabelledSequence label_sequence(const data::InstructionExample& example, std::size_t z_length);

// Mean masked next-token negative log-likelihood.
Tensor mmt_loss(const Tensor& logits, std::span<const int> labels, std::span<const std::uint8_t> mask);

// Full forward for one example, recorded on the active tape if any.
Tensor example_loss(const MultimodalModel& model, const data::InstructionExample& example);

struct Batch {
  std::vector<data::InstructionExample> examples;
};

// round(batch_size * mix_ratio) text-image examples, the rest text-only,
// drawn with replacement and shuffled.
Batch make_mixed_batch(const std::vector<data::InstructionExample>& text_pool,
                       const std::vector<data::InstructionExample>& image_pool,
                       const TrainConfig& cfg, Rng& rng);

double cosine_lr(std::size_t step, std::size_t total_steps, const TrainConfig& cfg);

struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t t = 0;
};

struct AdamWParams {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Decoupled decay (param -= lr*wd*param) followed by the bias-corrected Adam step.
void adamw_update(std::span<double> param, std::span<const double> grad, AdamMoments& state,
                  const AdamWParams& hp);

class Optimizer {
 public:
  Optimizer(std::vector<NamedTensor> params, const TrainConfig& cfg);

  // Applies one AdamW update to every parameter from its accumulated gradient.
  void step(double lr);
  const std::vector<NamedTensor>& params() const { return params_; }
  std::size_t steps_taken() const { return steps_; }

 private:
  std::vector<NamedTensor> params_;
  std::vector<AdamMoments> moments_;
  TrainConfig cfg_;
  std::size_t steps_ = 0;
};

struct StepMetrics {
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
};

StepMetrics train_step(const MultimodalModel& model, const Batch& batch, Optimizer& optimizer,
                       std::size_t step, std::size_t total_steps, const TrainConfig& cfg);

struct EvalResult {
  double loss = 0.0;
  double token_accuracy = 0.0;
  double exact_match = 0.0;
  double exact_match_text = 0.0;
  double exact_match_image = 0.0;
  std::size_t text_count = 0;
  std::size_t image_count = 0;
};

EvalResult evaluate(const MultimodalModel& model, const std::vector<data::InstructionExample>& set,
                    std::size_t max_new_tokens = 4, const ForwardOptions& options = {});

std::size_t steps_per_epoch(std::size_t text_pool, std::size_t image_pool, const TrainConfig& cfg);

struct EpochReport {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr = 0.0;
  double mean_loss = 0.0;
};

// Runs cfg.epochs epochs; `on_epoch` fires after each one.
void train(const MultimodalModel& model, const std::vector<data::InstructionExample>& text_pool,
           const std::vector<data::InstructionExample>& image_pool, const TrainConfig& cfg,
           const std::function<void(const EpochReport&)>& on_epoch = {});

// Rounds every trainable value to float32, the checkpoint precision.
void round_trainables_to_f32(const MultimodalModel& model);

}  // namespace mma

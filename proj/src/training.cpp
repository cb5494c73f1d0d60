#include "mma/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mma/errors.hpp"
#include "mma/ops.hpp"

namespace mma {

void TrainConfig::validate() const {
  if (batch_size < 1) throw DomainError("batch_size must be >= 1");
  if (!(mix_ratio >= 0.0 && mix_ratio <= 1.0)) throw DomainError("mix_ratio must lie in [0, 1]");
  if (lr_max < 0.0 || lr_min < 0.0) throw DomainError("learning rates must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw DomainError("adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw DomainError("adam_eps must be positive");
  if (weight_decay < 0.0 || grad_clip < 0.0) throw DomainError("negative weight_decay/grad_clip");
}

LabelledSequence label_sequence(const data::InstructionExample& example, std::size_t z_length) {
  if (example.response.empty()) throw EmptyMask("example has an empty response");
  LabelledSequence seq;
  const std::size_t s = example.response.size() - 1;
  seq.response_inputs.assign(example.response.begin(), example.response.begin() + static_cast<std::ptrdiff_t>(s));
  const std::size_t rows = z_length + s;
  seq.targets.assign(rows, data::kPad);
  seq.mask.assign(rows, 0);
  for (std::size_t i = 0; i <= s; ++i) {
    seq.targets[z_length - 1 + i] = example.response[i];
    seq.mask[z_length - 1 + i] = 1;
  }
  return seq;
}

Tensor mmt_loss(const Tensor& logits, std::span<const int> labels, std::span<const std::uint8_t> mask) {
  return ops::cross_entropy(logits, labels, mask);
}

Tensor example_loss(const MultimodalModel& model, const data::InstructionExample& example) {
  const AssembledInput input = assemble_example(model, example);
  const LabelledSequence seq = label_sequence(example, input.z.rows());
  const Tensor logits = forward_logits(model, input, seq.response_inputs);
  return mmt_loss(logits, seq.targets, seq.mask);
}

Batch make_mixed_batch(const std::vector<data::InstructionExample>& text_pool,
                       const std::vector<data::InstructionExample>& image_pool,
                       const TrainConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto n_image = static_cast<std::size_t>(
      std::llround(static_cast<double>(cfg.batch_size) * cfg.mix_ratio));
  const std::size_t n_text = cfg.batch_size - n_image;
  if (n_image > 0 && image_pool.empty()) throw PoolExhausted("text-image pool is empty");
  if (n_text > 0 && text_pool.empty()) throw PoolExhausted("text-only pool is empty");
  Batch batch;
  batch.examples.reserve(cfg.batch_size);
  for (std::size_t i = 0; i < n_text; ++i) batch.examples.push_back(text_pool[rng.index(text_pool.size())]);
  for (std::size_t i = 0; i < n_image; ++i) {
    batch.examples.push_back(image_pool[rng.index(image_pool.size())]);
  }
  std::shuffle(batch.examples.begin(), batch.examples.end(), rng.engine());
  return batch;
}

double cosine_lr(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
  if (step > total_steps) {
    throw DomainError("step " + std::to_string(step) + " beyond schedule of " +
                      std::to_string(total_steps));
  }
  if (total_steps == 0) return cfg.lr_max;
  double lr = cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) *
                               (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                                               static_cast<double>(total_steps)));
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
    lr *= static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  }
  return lr;
}

void adamw_update(std::span<double> param, std::span<const double> grad, AdamMoments& state,
                  const AdamWParams& hp) {
  if (grad.size() != param.size()) throw ShapeMismatch("adamw: gradient size differs from param");
  if (state.m.empty() && state.v.empty()) {
    state.m.assign(param.size(), 0.0);
    state.v.assign(param.size(), 0.0);
  }
  if (state.m.size() != param.size() || state.v.size() != param.size()) {
    throw ShapeMismatch("adamw: moment size differs from param");
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    param[i] -= hp.lr * hp.weight_decay * param[i];
    state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * grad[i];
    state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * grad[i] * grad[i];
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    param[i] -= hp.lr * m_hat / (std::sqrt(v_hat) + hp.eps);
  }
}

Optimizer::Optimizer(std::vector<NamedTensor> params, const TrainConfig& cfg)
    : params_(std::move(params)), moments_(params_.size()), cfg_(cfg) {}

void Optimizer::step(double lr) {
  const AdamWParams hp{lr, cfg_.weight_decay, cfg_.beta1, cfg_.beta2, cfg_.adam_eps};
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor t = params_[i].tensor;
    adamw_update(t.data(), t.grad(), moments_[i], hp);
  }
  ++steps_;
}

StepMetrics train_step(const MultimodalModel& model, const Batch& batch, Optimizer& optimizer,
                       std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
  if (batch.examples.empty()) throw DomainError("train_step on an empty batch");
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    std::vector<Tensor> losses;
    losses.reserve(batch.examples.size());
    for (const auto& ex : batch.examples) losses.push_back(example_loss(model, ex));
    loss = losses.front();
    for (std::size_t i = 1; i < losses.size(); ++i) loss = ops::add(loss, losses[i]);
    loss = ops::scale(loss, 1.0 / static_cast<double>(losses.size()));
  }
  tape.backward(loss);

  StepMetrics metrics;
  metrics.loss = loss.item();
  double sq = 0.0;
  for (const NamedTensor& p : optimizer.params()) {
    for (double g : p.tensor.grad()) sq += g * g;
  }
  metrics.grad_norm = std::sqrt(sq);
  if (cfg.grad_clip > 0.0 && metrics.grad_norm > cfg.grad_clip) {
    const double f = cfg.grad_clip / metrics.grad_norm;
    for (const NamedTensor& p : optimizer.params()) {
      for (double& g : p.tensor.grad()) g *= f;
    }
  }
  metrics.lr = cosine_lr(step, total_steps, cfg);
  optimizer.step(metrics.lr);
  tape.clear();
  return metrics;
}

EvalResult evaluate(const MultimodalModel& model, const std::vector<data::InstructionExample>& set,
                    std::size_t max_new_tokens, const ForwardOptions& options) {
  NoGradScope no_grad;
  EvalResult result;
  std::size_t tokens = 0, correct_tokens = 0, match_text = 0, match_image = 0;
  double loss_total = 0.0;
  for (const auto& ex : set) {
    const AssembledInput input = assemble_example(model, ex);
    const LabelledSequence seq = label_sequence(ex, input.z.rows());
    const Tensor logits = forward_logits(model, input, seq.response_inputs, options);
    loss_total += mmt_loss(logits, seq.targets, seq.mask).item();
    const std::size_t v = logits.cols();
    for (std::size_t r = 0; r < seq.mask.size(); ++r) {
      if (!seq.mask[r]) continue;
      const auto row = logits.data().subspan(r * v, v);
      const int pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      ++tokens;
      correct_tokens += pred == seq.targets[r];
    }
    const bool match = generate_greedy(model, input, max_new_tokens, options) == ex.response;
    if (ex.modality == ModalityTag::TextOnly) {
      ++result.text_count;
      match_text += match;
    } else {
      ++result.image_count;
      match_image += match;
    }
  }
  const std::size_t n = set.size();
  if (n == 0) return result;
  result.loss = loss_total / static_cast<double>(n);
  result.token_accuracy = static_cast<double>(correct_tokens) / static_cast<double>(tokens);
  result.exact_match = static_cast<double>(match_text + match_image) / static_cast<double>(n);
  result.exact_match_text =
      result.text_count ? static_cast<double>(match_text) / static_cast<double>(result.text_count) : 0.0;
  result.exact_match_image = result.image_count ? static_cast<double>(match_image) /
                                                      static_cast<double>(result.image_count)
                                                : 0.0;
  return result;
}

std::size_t steps_per_epoch(std::size_t text_pool, std::size_t image_pool, const TrainConfig& cfg) {
  std::size_t examples = 0;
  if (cfg.mix_ratio < 1.0) examples += text_pool;
  if (cfg.mix_ratio > 0.0) examples += image_pool;
  return std::max<std::size_t>(1, (examples + cfg.batch_size - 1) / cfg.batch_size);
}

void train(const MultimodalModel& model, const std::vector<data::InstructionExample>& text_pool,
           const std::vector<data::InstructionExample>& image_pool, const TrainConfig& cfg,
           const std::function<void(const EpochReport&)>& on_epoch) {
  cfg.validate();
  const std::size_t per_epoch = steps_per_epoch(text_pool.size(), image_pool.size(), cfg);
  const std::size_t total = per_epoch * cfg.epochs;
  Optimizer optimizer(model.trainable_parameters(), cfg);
  Rng rng(derive_seed(cfg.seed, 3));
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    double lr = 0.0;
    for (std::size_t i = 0; i < per_epoch; ++i, ++step) {
      const Batch batch = make_mixed_batch(text_pool, image_pool, cfg, rng);
      const StepMetrics m = train_step(model, batch, optimizer, step, total, cfg);
      loss_sum += m.loss;
      lr = m.lr;
    }
    if (on_epoch) on_epoch({epoch + 1, step, lr, loss_sum / static_cast<double>(per_epoch)});
  }
}

void round_trainables_to_f32(const MultimodalModel& model) {
  for (const NamedTensor& p : model.trainable_parameters()) {
    Tensor t = p.tensor;
    for (double& v : t.data()) v = static_cast<double>(static_cast<float>(v));
  }
}

}  // namespace mma

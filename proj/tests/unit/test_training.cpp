#include <cmath>
#include <numbers>
#include <vector>

#include "doctest.h"
#include "mma/checkpoint.hpp"
#include "mma/errors.hpp"
#include "mma/ops.hpp"
#include "mma/training.hpp"

using namespace mma;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.width = 16;
  c.llm_layers = 2;
  c.llm_heads = 2;
  c.llm_ffn_hidden = 32;
  c.max_seq_len = 32;
  c.vit_layers = 4;
  c.vit_width = 8;
  c.vit_heads = 2;
  c.vit_ffn_hidden = 16;
  c.neck_hidden = 4;
  c.adapter_rank = 2;
  return c;
}

std::vector<std::vector<double>> snapshot(const std::vector<NamedTensor>& params) {
  std::vector<std::vector<double>> out;
  for (const auto& p : params) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("label mask covers exactly the response tokens") {
  data::InstructionExample ex;
  ex.instruction = data::tokenize("3+4=?");
  ex.response = {data::Vocabulary::instance().id("7"), data::kEos};
  const LabelledSequence seq = label_sequence(ex, 6);
  CHECK(seq.response_inputs == std::vector<int>{ex.response[0]});
  REQUIRE(seq.mask.size() == 7);
  CHECK(seq.mask == std::vector<std::uint8_t>{0, 0, 0, 0, 0, 1, 1});
  CHECK(seq.targets[5] == ex.response[0]);
  CHECK(seq.targets[6] == data::kEos);
}

TEST_CASE("mmt_loss examples") {
  const std::vector<int> labels{3, 1, 4};
  const std::vector<std::uint8_t> all{1, 1, 1};
  Tensor perfect({3, 64});
  for (std::size_t r = 0; r < 3; ++r) perfect.data()[r * 64 + static_cast<std::size_t>(labels[r])] = 30.0;
  CHECK(mmt_loss(perfect, labels, all).item() <= 1e-6);
  CHECK(mmt_loss(Tensor({3, 64}), labels, all).item() == doctest::Approx(std::log(64.0)).epsilon(1e-14));
  CHECK(std::log(64.0) == doctest::Approx(4.158883).epsilon(1e-7));

  Rng rng(1);
  Tensor logits({3, 64});
  for (double& v : logits.data()) v = rng.normal(0.0, 2.0);
  const std::vector<std::uint8_t> one{0, 1, 0};
  const Tensor row = ops::slice_rows(logits, 1, 1);
  const std::vector<int> single{labels[1]};
  const std::vector<std::uint8_t> on{1};
  CHECK(mmt_loss(logits, labels, one).item() == doctest::Approx(mmt_loss(row, single, on).item()).epsilon(1e-15));
  const std::vector<std::uint8_t> none{0, 0, 0};
  CHECK_THROWS_AS(mmt_loss(logits, labels, none), EmptyMask);
}

TEST_CASE("cosine schedule examples") {
  TrainConfig cfg;
  CHECK(cosine_lr(0, 100, cfg) == 9e-3);
  CHECK(cosine_lr(100, 100, cfg) == doctest::Approx(0.0));
  cfg.lr_min = 1e-3;
  CHECK(cosine_lr(100, 100, cfg) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(cosine_lr(50, 100, cfg) == doctest::Approx((9e-3 + 1e-3) / 2).epsilon(1e-12));
  CHECK_THROWS_AS(cosine_lr(101, 100, cfg), DomainError);
  double prev = 1.0;
  for (std::size_t s = 0; s <= 100; ++s) {
    const double lr = cosine_lr(s, 100, cfg);
    CHECK(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("adamw examples") {
  AdamWParams hp;
  {
    std::vector<double> p{1.5, -2.0};
    const std::vector<double> g{0.0, 0.0};
    AdamMoments st;
    hp.lr = 0.1;
    hp.weight_decay = 0.0;
    adamw_update(p, g, st, hp);
    CHECK(p == std::vector<double>{1.5, -2.0});
  }
  {
    std::vector<double> p{0.0};
    const std::vector<double> g{1.0};
    AdamMoments st;
    hp.lr = 0.1;
    adamw_update(p, g, st, hp);
    CHECK(p[0] == doctest::Approx(-0.1 / (1.0 + 1e-8)).epsilon(1e-14));
    CHECK(p[0] > -0.1);
  }
  {
    std::vector<double> p{2.0};
    const std::vector<double> g{0.0};
    AdamMoments st;
    hp.lr = 9e-3;
    hp.weight_decay = 0.02;
    adamw_update(p, g, st, hp);
    CHECK(p[0] == doctest::Approx(2.0 * (1.0 - 1.8e-4)).epsilon(1e-15));
  }
  std::vector<double> p{1.0, 2.0};
  const std::vector<double> g{1.0};
  AdamMoments st;
  CHECK_THROWS_AS(adamw_update(p, g, st, hp), ShapeMismatch);
  AdamMoments wrong{{0.0}, {0.0}, 0};
  const std::vector<double> g2{1.0, 1.0};
  CHECK_THROWS_AS(adamw_update(p, g2, wrong, hp), ShapeMismatch);
}

TEST_CASE("mixed batches") {
  const auto text = data::gen_text_task(50, 1);
  const auto image = data::gen_multimodal_task(50, 2);
  TrainConfig cfg;
  const auto count_images = [](const Batch& b) {
    std::size_t n = 0;
    for (const auto& ex : b.examples) n += ex.modality == ModalityTag::TextImage;
    return n;
  };
  Rng rng(3);
  const Batch half = make_mixed_batch(text, image, cfg, rng);
  CHECK(half.examples.size() == 32);
  CHECK(count_images(half) == 16);
  bool interleaved = false;
  for (std::size_t i = 1; i < 16; ++i) interleaved |= half.examples[i].modality != half.examples[0].modality;
  CHECK(interleaved);

  cfg.mix_ratio = 0.0;
  CHECK(count_images(make_mixed_batch(text, image, cfg, rng)) == 0);
  CHECK_NOTHROW(make_mixed_batch(text, {}, cfg, rng));
  cfg.mix_ratio = 0.3;
  CHECK(count_images(make_mixed_batch(text, image, cfg, rng)) == 10);
  cfg.mix_ratio = 1.0;
  CHECK_THROWS_AS(make_mixed_batch(text, {}, cfg, rng), PoolExhausted);
  cfg.mix_ratio = 0.5;
  CHECK_THROWS_AS(make_mixed_batch({}, image, cfg, rng), PoolExhausted);

  Rng a(9), b(9);
  const Batch x = make_mixed_batch(text, image, cfg, a);
  const Batch y = make_mixed_batch(text, image, cfg, b);
  for (std::size_t i = 0; i < x.examples.size(); ++i) CHECK(x.examples[i].instruction == y.examples[i].instruction);

  cfg.mix_ratio = 1.5;
  CHECK_THROWS_AS(cfg.validate(), DomainError);
  cfg.mix_ratio = 0.5;
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), DomainError);
}

TEST_CASE("batch loss equals the mean of independent per-example losses") {
  const MultimodalModel m(small_config());
  const auto text = data::gen_text_task(3, 4);
  const auto image = data::gen_multimodal_task(3, 5);
  Batch batch;
  for (std::size_t i = 0; i < 3; ++i) {
    batch.examples.push_back(text[i]);
    batch.examples.push_back(image[i]);
  }
  double mean = 0.0;
  for (const auto& ex : batch.examples) mean += example_loss(m, ex).item();
  mean /= 6.0;
  TrainConfig cfg;
  cfg.lr_max = 0.0;
  Optimizer opt(m.trainable_parameters(), cfg);
  const StepMetrics s = train_step(m, batch, opt, 0, 10, cfg);
  CHECK(s.loss == doctest::Approx(mean).epsilon(1e-13));
}

TEST_CASE("zero learning rate leaves every parameter bitwise unchanged") {
  const MultimodalModel m(small_config());
  const auto before_a = snapshot(m.trainable_parameters());
  const auto before_f = snapshot(m.frozen_parameters());
  TrainConfig cfg;
  cfg.lr_max = 0.0;
  cfg.batch_size = 4;
  Optimizer opt(m.trainable_parameters(), cfg);
  Rng rng(1);
  const Batch b = make_mixed_batch(data::gen_text_task(8, 1), data::gen_multimodal_task(8, 2), cfg, rng);
  const StepMetrics s = train_step(m, b, opt, 0, 1, cfg);
  CHECK(std::isfinite(s.loss));
  CHECK(s.grad_norm > 0.0);
  CHECK(snapshot(m.trainable_parameters()) == before_a);
  CHECK(snapshot(m.frozen_parameters()) == before_f);
}

TEST_CASE("ten steps on a fixed batch mostly decrease the loss; frozen hash is unchanged") {
  const MultimodalModel m(small_config());
  const std::string hash = frozen_digest(m);
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.lr_max = 3e-3;
  Rng rng(2);
  const Batch b = make_mixed_batch(data::gen_text_task(8, 1), data::gen_multimodal_task(8, 2), cfg, rng);
  Optimizer opt(m.trainable_parameters(), cfg);
  std::vector<double> losses;
  for (std::size_t s = 0; s < 11; ++s) losses.push_back(train_step(m, b, opt, s, 100, cfg).loss);
  int decreases = 0;
  for (std::size_t i = 1; i < losses.size(); ++i) decreases += losses[i] < losses[i - 1];
  CHECK(decreases >= 8);
  CHECK(frozen_digest(m) == hash);
  const auto before = snapshot(m.trainable_parameters());
  CHECK(opt.steps_taken() == 11);
  CHECK(before != snapshot(MultimodalModel(small_config()).trainable_parameters()));
}

TEST_CASE("training is deterministic to the last bit") {
  const auto run = [] {
    const MultimodalModel m(small_config());
    TrainConfig cfg;
    cfg.batch_size = 4;
    cfg.epochs = 2;
    double last = 0.0;
    train(m, data::gen_text_task(8, 1), data::gen_multimodal_task(8, 2), cfg,
          [&](const EpochReport& r) { last = r.mean_loss; });
    return std::make_pair(last, snapshot(m.trainable_parameters()));
  };
  const auto a = run();
  const auto b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("steps per epoch follow the pools the mix draws from") {
  TrainConfig cfg;
  CHECK(steps_per_epoch(2000, 2000, cfg) == 125);
  cfg.mix_ratio = 0.0;
  CHECK(steps_per_epoch(2000, 2000, cfg) == 63);
  cfg.mix_ratio = 1.0;
  CHECK(steps_per_epoch(2000, 2000, cfg) == 63);
}

TEST_CASE("evaluation reports per-modality exact match") {
  const MultimodalModel m(small_config());
  auto set = data::gen_text_task(4, 1);
  const auto img = data::gen_multimodal_task(6, 2);
  set.insert(set.end(), img.begin(), img.end());
  const EvalResult r = evaluate(m, set);
  CHECK(r.text_count == 4);
  CHECK(r.image_count == 6);
  CHECK(std::isfinite(r.loss));
  CHECK(r.token_accuracy >= 0.0);
  CHECK(r.token_accuracy <= 1.0);
  const EvalResult again = evaluate(m, set);
  CHECK(again.loss == r.loss);
  CHECK(again.exact_match == r.exact_match);
}

}

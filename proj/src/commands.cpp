#include "mma/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <map>
#include <ostream>

#include "mma/checkpoint.hpp"
#include "mma/errors.hpp"
#include "mma/kernels.hpp"
#include "mma/ops.hpp"
#include "mma/training.hpp"

namespace mma::cli {
namespace {

using Clock = std::chrono::steady_clock;
using Examples = std::vector<data::InstructionExample>;

double elapsed_ms(Clock::time_point since) {
  return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

std::vector<data::InstructionExample> concat(const std::vector<data::InstructionExample>& a,
                                             const std::vector<data::InstructionExample>& b) {
  std::vector<data::InstructionExample> out(a);
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

std::pair<std::vector<data::InstructionExample>, std::vector<data::InstructionExample>> split_pool(
    std::vector<data::InstructionExample> all, std::size_t n_train, std::uint64_t seed) {
  if (n_train >= all.size()) return {std::move(all), {}};
  if (n_train == 0) return {{}, std::move(all)};
  const double frac = static_cast<double>(n_train) / static_cast<double>(all.size());
  return data::split_dataset(all, frac, seed);
}

RunConfig config_from_checkpoint(const std::string& checkpoint) {
  const CheckpointMeta meta = read_checkpoint_meta(checkpoint);
  if (meta.config_text.empty()) throw CorruptCheckpoint("checkpoint carries no config");
  RunConfig cfg = RunConfig::parse(meta.config_text);
  cfg.finalize();
  return cfg;
}

data::SyntheticImage parse_grid(const std::string& text, std::size_t grid_size) {
  data::SyntheticImage img;
  img.grid_size = grid_size;
  std::size_t col = 0, rows = 0;
  for (char ch : text) {
    if (ch == '/') {
      if (col != grid_size) throw DomainError("grid row " + std::to_string(rows) + " has wrong width");
      col = 0;
      ++rows;
      continue;
    }
    if (ch < '0' || ch >= '0' + data::kColorCount) throw DomainError("grid cells must be digits 0-7");
    img.cells.push_back(ch - '0');
    ++col;
  }
  if (col != grid_size || rows + 1 != grid_size) throw DomainError("grid must be square of the model's size");
  return img;
}

}  // namespace

std::vector<data::InstructionExample> Datasets::train_set() const { return concat(text_train, image_train); }
std::vector<data::InstructionExample> Datasets::eval_set() const { return concat(text_eval, image_eval); }

Datasets build_datasets(const RunConfig& cfg) {
  Datasets d;
  const std::size_t n_text = cfg.text_train + cfg.text_eval;
  const std::size_t n_image = cfg.image_train + cfg.image_eval;
  auto text = n_text ? data::gen_text_task(n_text, derive_seed(cfg.seed, 10)) : Examples{};
  auto image = n_image ? data::gen_multimodal_task(n_image, derive_seed(cfg.seed, 11), cfg.model.grid_size)
                       : Examples{};
  std::tie(d.text_train, d.text_eval) = split_pool(std::move(text), cfg.text_train, derive_seed(cfg.seed, 12));
  std::tie(d.image_train, d.image_eval) =
      split_pool(std::move(image), cfg.image_train, derive_seed(cfg.seed, 13));
  return d;
}

double last_lr(std::size_t steps_done, std::size_t total, const TrainConfig& cfg) {
  return cosine_lr(steps_done == 0 ? 0 : steps_done - 1, total, cfg);
}

void apply_kernels(const RunConfig& cfg) {
  if (cfg.kernels != "auto") kernels::select(kernels::parse_isa(cfg.kernels));
}

int cmd_train(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const auto start = Clock::now();
  apply_kernels(cfg);
  std::filesystem::create_directories(cfg.out_dir);
  const Datasets data = build_datasets(cfg);
  const MultimodalModel model(cfg.model);
  const std::size_t trainable = parameter_report(model).trainable_count;
  const std::size_t per_epoch = steps_per_epoch(data.text_train.size(), data.image_train.size(), cfg.train);
  const std::size_t total = per_epoch * cfg.train.epochs;
  const auto eval_set = data.eval_set();

  std::filesystem::remove(cfg.metrics_path());
  MetricsWriter metrics(cfg.metrics_path());
  const auto record = [&](std::size_t epoch, std::size_t step) {
    MetricsRecord m = MetricsRecord::from_eval(evaluate(model, eval_set, cfg.max_new_tokens));
    m.step = step;
    m.epoch = epoch;
    m.split = "eval";
    m.lr = last_lr(step, total, cfg.train);
    m.trainable_params = trainable;
    m.wall_ms = elapsed_ms(start);
    metrics.append(m);
    return m;
  };

  err << "training " << total << " steps (" << per_epoch << " per epoch), " << trainable
      << " trainable parameters\n";
  train(model, data.text_train, data.image_train, cfg.train, [&](const EpochReport& r) {
    out << "epoch " << r.epoch << " step " << r.step << " lr " << r.lr << " loss " << r.mean_loss << '\n';
    if (cfg.eval_every > 0 && r.epoch % cfg.eval_every == 0 && r.epoch != cfg.train.epochs) {
      record(r.epoch, r.step);
    }
  });

  round_trainables_to_f32(model);
  const MetricsRecord final_record = record(cfg.train.epochs, total);
  save_checkpoint(model, cfg.checkpoint_path(), {total, cfg.to_text()});
  out << final_record.to_json() << '\n';
  out << "checkpoint " << cfg.checkpoint_path() << '\n';
  return 0;
}

MetricsRecord cmd_eval(const RunConfig& cfg, const std::string& checkpoint, std::string_view split) {
  const auto start = Clock::now();
  if (split != "train" && split != "eval") throw ConfigError("split must be train or eval");
  apply_kernels(cfg);
  const MultimodalModel model(cfg.model);
  const CheckpointMeta meta = load_checkpoint(model, checkpoint);
  const Datasets data = build_datasets(cfg);
  const auto set = split == "train" ? data.train_set() : data.eval_set();
  const std::size_t per_epoch = steps_per_epoch(data.text_train.size(), data.image_train.size(), cfg.train);
  const std::size_t total = per_epoch * cfg.train.epochs;

  MetricsRecord m = MetricsRecord::from_eval(evaluate(model, set, cfg.max_new_tokens));
  m.step = meta.step;
  m.epoch = meta.step / per_epoch;
  m.split = std::string(split);
  m.lr = last_lr(std::min(meta.step, total), total, cfg.train);
  m.trainable_params = parameter_report(model).trainable_count;
  m.wall_ms = elapsed_ms(start);
  return m;
}

int cmd_generate(const RunConfig& cfg, const std::string& checkpoint, std::string_view modality,
                 const std::string& instruction, const std::string& grid, std::ostream& out) {
  apply_kernels(cfg);
  const MultimodalModel model(cfg.model);
  if (!checkpoint.empty()) load_checkpoint(model, checkpoint);
  data::InstructionExample ex;
  ex.modality = parse_modality(modality);
  ex.instruction = data::tokenize(instruction);
  if (ex.modality == ModalityTag::TextImage) {
    if (grid.empty()) throw ModalityMismatch("image modality needs --grid");
    ex.image = parse_grid(grid, cfg.model.grid_size);
  } else if (!grid.empty()) {
    throw ModalityMismatch("text modality takes no grid");
  }
  const AssembledInput input = assemble_example(model, ex);
  std::vector<int> ids = generate_top_p(model, input, cfg.max_new_tokens, cfg.gen_temperature,
                                        cfg.gen_top_p, derive_seed(cfg.seed, 20));
  if (!ids.empty() && ids.back() == data::kEos) ids.pop_back();
  out << data::detokenize(ids) << '\n';
  return 0;
}

int cmd_inspect_routing(const std::string& checkpoint, std::ostream& out) {
  const RunConfig cfg = config_from_checkpoint(checkpoint);
  const MultimodalModel model(cfg.model);
  load_checkpoint(model, checkpoint);
  const auto rows = routing_table(model);
  bool ok = true;
  out << std::setprecision(9);
  out << "layer  text-only w            text-image w           diff                   L1\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& t = rows[i].text_only;
    const auto& m = rows[i].text_image;
    const double l1 = std::abs(t[0] - m[0]) + std::abs(t[1] - m[1]);
    out << i << "  [" << t[0] << ", " << t[1] << "]  [" << m[0] << ", " << m[1] << "]  [" << t[0] - m[0]
        << ", " << t[1] - m[1] << "]  " << l1 << '\n';
    for (const auto* w : {&t, &m}) {
      if (std::abs((*w)[0] + (*w)[1] - 1.0) > 1e-9) ok = false;
    }
  }
  out << (ok ? "all routing pairs sum to 1\n" : "routing pair does not sum to 1\n");
  return ok ? 0 : 1;
}

RunConfig tiny_config(const RunConfig& base) {
  RunConfig cfg = base;
  ModelConfig& m = cfg.model;
  m.width = 16;
  m.llm_layers = 2;
  m.llm_heads = 2;
  m.llm_ffn_hidden = 32;
  m.max_seq_len = 24;
  m.vit_layers = 4;
  m.cls_stride = 2;
  m.vit_width = 8;
  m.vit_heads = 2;
  m.vit_ffn_hidden = 16;
  m.grid_size = 4;
  m.neck_hidden = 4;
  m.adapter_rank = 2;
  cfg.finalize();
  return cfg;
}

std::string parameter_group(std::string_view name) {
  if (name.starts_with("modality")) return "modality_embedding";
  if (name.starts_with("neck.")) return "visual_neck";
  if (name.find(".router.") != std::string_view::npos) return "router";
  if (name.starts_with("vit.")) return "encoder_adapter";
  return "mm_adapter";
}

std::vector<GroupError> group_errors(const GradCheckReport& report) {
  std::map<std::string, GroupError> groups;
  for (const auto& e : report.entries) {
    const std::string g = parameter_group(e.name);
    auto [it, fresh] = groups.try_emplace(g, GroupError{g, e.max_rel_error, e.name});
    if (!fresh && e.max_rel_error > it->second.max_rel_error) {
      it->second.max_rel_error = e.max_rel_error;
      it->second.worst_tensor = e.name;
    }
  }
  std::vector<GroupError> out;
  for (auto& [_, g] : groups) out.push_back(g);
  return out;
}

int cmd_gradcheck(const RunConfig& base, std::ostream& out) {
  constexpr double kEps = 1e-5;
  constexpr double kThreshold = 1e-4;
  const auto start = Clock::now();
  const RunConfig cfg = tiny_config(base);
  apply_kernels(cfg);
  const MultimodalModel model(cfg.model);
  Rng rng(derive_seed(cfg.seed, 30));
  const auto params = model.trainable_parameters();
  for (const NamedTensor& p : params) {
    Tensor t = p.tensor;
    for (double& v : t.data()) v = rng.normal(0.0, 0.3);
  }
  const auto text = data::gen_text_task(1, derive_seed(cfg.seed, 31));
  const auto image = data::gen_multimodal_task(1, derive_seed(cfg.seed, 32), cfg.model.grid_size);
  const std::vector<data::InstructionExample> batch{text.front(), image.front()};
  const LossFn loss = [&] {
    return ops::scale(ops::add(example_loss(model, batch[0]), example_loss(model, batch[1])), 0.5);
  };
  const GradCheckReport report = grad_check(loss, params, kEps);
  out << std::scientific << std::setprecision(3);
  out << "grad-check: " << report.coordinates << " coordinates, eps " << kEps << '\n';
  for (const GroupError& g : group_errors(report)) {
    out << "  " << std::left << std::setw(20) << g.group << std::right << " max rel error " << g.max_rel_error
        << "  (" << g.worst_tensor << ")\n";
  }
  const GradCheckEntry& w = report.worst();
  const bool pass = report.max_rel_error < kThreshold;
  out << (pass ? "PASS" : "FAIL") << " max rel error " << report.max_rel_error << " at " << w.name << '['
      << w.worst_index << "] analytic " << w.analytic << " numeric " << w.numeric << '\n';
  out << std::defaultfloat << "elapsed " << elapsed_ms(start) / 1000.0 << " s\n";
  return pass ? 0 : 1;
}

int cmd_merge(const std::string& checkpoint, std::string_view modality, const std::string& out_path,
              std::ostream& out, std::ostream& err) {
  constexpr double kThreshold = 1e-6;
  constexpr std::size_t kInputs = 16;
  ModalityTag tag;
  try {
    tag = parse_modality(modality);
  } catch (const DomainError& e) {
    err << "usage: " << e.what() << '\n';
    return 2;
  }
  const RunConfig cfg = config_from_checkpoint(checkpoint);
  apply_kernels(cfg);
  const MultimodalModel dynamic(cfg.model);
  const CheckpointMeta meta = load_checkpoint(dynamic, checkpoint);
  const auto merged = merge_model(dynamic, tag);
  save_merged_checkpoint(dynamic, merged, out_path, meta);

  const MultimodalModel reloaded(cfg.model);
  const MergedCheckpoint stored = load_merged_checkpoint(reloaded, out_path);
  const auto inputs = tag == ModalityTag::TextOnly
                          ? data::gen_text_task(kInputs, derive_seed(cfg.seed, 40))
                          : data::gen_multimodal_task(kInputs, derive_seed(cfg.seed, 41), cfg.model.grid_size);
  NoGradScope no_grad;
  double in_memory = 0.0, from_file = 0.0;
  const auto deviation = [](const Tensor& a, const Tensor& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a.at(i) - b.at(i)));
    return worst;
  };
  for (const auto& ex : inputs) {
    const std::span<const int> resp(ex.response.data(), ex.response.size() - 1);
    const Tensor ref = forward_logits(dynamic, assemble_example(dynamic, ex), resp);
    const ForwardOptions mem{AdapterMode::Merged, &merged};
    in_memory = std::max(in_memory, deviation(ref, forward_logits(dynamic, assemble_example(dynamic, ex), resp, mem)));
    const ForwardOptions file{AdapterMode::Merged, &stored.merged};
    from_file = std::max(from_file,
                         deviation(ref, forward_logits(reloaded, assemble_example(reloaded, ex), resp, file)));
  }
  out << std::scientific << std::setprecision(3);
  out << "merged " << modality_name(tag) << " adapters -> " << out_path << '\n';
  out << "audit over " << kInputs << " inputs: max logit deviation " << from_file
      << " (stored 32-bit), " << in_memory << " (64-bit merge)\n";
  const bool pass = from_file < kThreshold;
  out << (pass ? "PASS" : "FAIL") << " threshold " << kThreshold << '\n';
  return pass ? 0 : 1;
}

int cmd_gen_data(const RunConfig& cfg, std::ostream& out) {
  std::filesystem::create_directories(cfg.out_dir);
  const Datasets d = build_datasets(cfg);
  const std::filesystem::path dir(cfg.out_dir);
  const std::pair<const char*, const std::vector<data::InstructionExample>*> files[] = {
      {"text_train.tsv", &d.text_train}, {"image_train.tsv", &d.image_train},
      {"text_eval.tsv", &d.text_eval},   {"image_eval.tsv", &d.image_eval}};
  for (const auto& [name, set] : files) {
    data::save_records((dir / name).string(), *set);
    out << (dir / name).string() << ": " << set->size() << " records\n";
  }
  return 0;
}

}  // namespace mma::cli

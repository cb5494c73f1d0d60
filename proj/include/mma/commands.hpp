#pragma once
// Command implementations behind the `mma` executable. Each returns the
// process exit code and writes human output to `out`, diagnostics to `err`.

#include <cstddef>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "mma/config.hpp"
#include "mma/data.hpp"
#include "mma/grad_check.hpp"
#include "mma/metrics.hpp"

namespace mma::cli {

struct Datasets {
  std::vector<data::InstructionExample> text_train, image_train;
  std::vector<data::InstructionExample> text_eval, image_eval;

  std::vector<data::InstructionExample> train_set() const;
  std::vector<data::InstructionExample> eval_set() const;
};

// Held-out examples come from the same generators, split off by seed.
Datasets build_datasets(const RunConfig& cfg);

// Learning rate of the most recent update after `steps_done` of `total` steps.
double last_lr(std::size_t steps_done, std::size_t total, const TrainConfig& cfg);

void apply_kernels(const RunConfig& cfg);

int cmd_train(const RunConfig& cfg, std::ostream& out, std::ostream& err);

// Throws CorruptCheckpoint/IoError.
MetricsRecord cmd_eval(const RunConfig& cfg, const std::string& checkpoint, std::string_view split);

int cmd_generate(const RunConfig& cfg, const std::string& checkpoint, std::string_view modality,
                 const std::string& instruction, const std::string& grid, std::ostream& out);

// Rebuilds the model from the config stored in the checkpoint.
int cmd_inspect_routing(const std::string& checkpoint, std::ostream& out);

// Small dimensions sharing tau, scale and seed with `base`.
RunConfig tiny_config(const RunConfig& base);

struct GroupError {
  std::string group;
  double max_rel_error = 0.0;
  std::string worst_tensor;
};

std::string parameter_group(std::string_view name);
std::vector<GroupError> group_errors(const GradCheckReport& report);

int cmd_gradcheck(const RunConfig& cfg, std::ostream& out);

int cmd_merge(const std::string& checkpoint, std::string_view modality, const std::string& out_path,
              std::ostream& out, std::ostream& err);

int cmd_gen_data(const RunConfig& cfg, std::ostream& out);

}  // namespace mma::cli

#pragma once
// Evaluation records, one JSON object per line.

#include <cstddef>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>

#include "mma/training.hpp"

namespace mma {

struct MetricsRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::string split;  // "train" or "eval"
  double loss = 0.0;
  double token_accuracy = 0.0;
  double exact_match_accuracy = 0.0;
  double exact_match_text = 0.0;
  double exact_match_image = 0.0;
  double lr = 0.0;
  std::size_t trainable_params = 0;
  double wall_ms = 0.0;

  static MetricsRecord from_eval(const EvalResult& r);

  std::string to_json() const;
  static MetricsRecord from_json(std::string_view line);

  // Everything but wall_ms.
  bool same_result(const MetricsRecord& other) const;
};

// Returns an error description, or nothing if the line is a valid record.
std::optional<std::string> check_metrics_line(std::string_view line);

class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path);
  void append(const MetricsRecord& record);

 private:
  std::ofstream out_;
};

}  // namespace mma

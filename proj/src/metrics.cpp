#include "mma/metrics.hpp"

#include <cmath>
#include "json.hpp"

#include "mma/errors.hpp"

namespace mma {

using nlohmann::json;

MetricsRecord MetricsRecord::from_eval(const EvalResult& r) {
  MetricsRecord m;
  m.loss = r.loss;
  m.token_accuracy = r.token_accuracy;
  m.exact_match_accuracy = r.exact_match;
  m.exact_match_text = r.exact_match_text;
  m.exact_match_image = r.exact_match_image;
  return m;
}

std::string MetricsRecord::to_json() const {
  const json j = {{"step", step},
                  {"epoch", epoch},
                  {"split", split},
                  {"loss", loss},
                  {"token_accuracy", token_accuracy},
                  {"exact_match_accuracy", exact_match_accuracy},
                  {"exact_match_text", exact_match_text},
                  {"exact_match_image", exact_match_image},
                  {"lr", lr},
                  {"trainable_params", trainable_params},
                  {"wall_ms", wall_ms}};
  return j.dump();
}

MetricsRecord MetricsRecord::from_json(std::string_view line) {
  if (auto err = check_metrics_line(line)) throw Error("invalid metrics record: " + *err);
  const json j = json::parse(line);
  MetricsRecord m;
  m.step = j.at("step").get<std::size_t>();
  m.epoch = j.at("epoch").get<std::size_t>();
  m.split = j.at("split").get<std::string>();
  m.loss = j.at("loss").get<double>();
  m.token_accuracy = j.at("token_accuracy").get<double>();
  m.exact_match_accuracy = j.at("exact_match_accuracy").get<double>();
  m.exact_match_text = j.at("exact_match_text").get<double>();
  m.exact_match_image = j.at("exact_match_image").get<double>();
  m.lr = j.at("lr").get<double>();
  m.trainable_params = j.at("trainable_params").get<std::size_t>();
  m.wall_ms = j.at("wall_ms").get<double>();
  return m;
}

bool MetricsRecord::same_result(const MetricsRecord& o) const {
  return step == o.step && epoch == o.epoch && split == o.split && loss == o.loss &&
         token_accuracy == o.token_accuracy && exact_match_accuracy == o.exact_match_accuracy &&
         exact_match_text == o.exact_match_text && exact_match_image == o.exact_match_image &&
         lr == o.lr && trainable_params == o.trainable_params;
}

std::optional<std::string> check_metrics_line(std::string_view line) {
  const json j = json::parse(line, nullptr, false);
  if (j.is_discarded()) return "not valid JSON";
  if (!j.is_object()) return "not a JSON object";
  static const char* kCounts[] = {"step", "epoch", "trainable_params"};
  static const char* kReals[] = {"loss", "token_accuracy", "exact_match_accuracy", "exact_match_text",
                                 "exact_match_image", "lr", "wall_ms"};
  static const char* kRates[] = {"token_accuracy", "exact_match_accuracy", "exact_match_text",
                                 "exact_match_image"};
  std::size_t expected = 1;
  for (const char* k : kCounts) {
    if (!j.contains(k) || !j[k].is_number_unsigned()) return std::string(k) + " must be a non-negative integer";
    ++expected;
  }
  for (const char* k : kReals) {
    if (!j.contains(k) || !j[k].is_number()) return std::string(k) + " must be a number";
    if (!std::isfinite(j[k].get<double>())) return std::string(k) + " must be finite";
    ++expected;
  }
  for (const char* k : kRates) {
    const double v = j[k].get<double>();
    if (v < 0.0 || v > 1.0) return std::string(k) + " must lie in [0, 1]";
  }
  if (!j.contains("split") || !j["split"].is_string()) return "split must be a string";
  const auto split = j["split"].get<std::string>();
  if (split != "train" && split != "eval") return "split must be train or eval";
  if (j.size() != expected) return "unexpected extra fields";
  return std::nullopt;
}

MetricsWriter::MetricsWriter(const std::string& path) : out_(path, std::ios::app) {
  if (!out_) throw IoError("cannot open metrics file '" + path + "'");
}

void MetricsWriter::append(const MetricsRecord& record) {
  out_ << record.to_json() << '\n';
  out_.flush();
  if (!out_) throw IoError("metrics write failed");
}

}  // namespace mma

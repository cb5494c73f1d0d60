#include "mma/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mma/errors.hpp"

namespace mma::sampling {

std::vector<double> softmax_with_temperature(std::span<const double> logits, double temperature) {
  if (!(temperature > 0.0)) throw DomainError("temperature must be positive");
  if (logits.empty()) throw ShapeMismatch("empty logits");
  const double top = *std::max_element(logits.begin(), logits.end());
  std::vector<double> probs(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = std::exp((logits[i] - top) / temperature);
    total += probs[i];
  }
  for (double& p : probs) p /= total;
  return probs;
}

std::vector<int> nucleus_set(std::span<const double> probs, double top_p) {
  if (!(top_p > 0.0 && top_p <= 1.0)) throw DomainError("top_p must lie in (0, 1]");
  std::vector<int> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return probs[static_cast<std::size_t>(a)] >
                                              probs[static_cast<std::size_t>(b)]; });
  std::vector<int> kept;
  double mass = 0.0;
  for (int id : order) {
    kept.push_back(id);
    mass += probs[static_cast<std::size_t>(id)];
    if (mass >= top_p) break;
  }
  return kept;
}

int sample_top_p(std::span<const double> logits, double temperature, double top_p, Rng& rng) {
  const std::vector<double> probs = softmax_with_temperature(logits, temperature);
  const std::vector<int> kept = nucleus_set(probs, top_p);
  double mass = 0.0;
  for (int id : kept) mass += probs[static_cast<std::size_t>(id)];
  double u = rng.uniform01() * mass;
  for (int id : kept) {
    u -= probs[static_cast<std::size_t>(id)];
    if (u < 0.0) return id;
  }
  return kept.back();
}

int argmax(std::span<const double> values) {
  if (values.empty()) throw ShapeMismatch("argmax of an empty row");
  return static_cast<int>(std::max_element(values.begin(), values.end()) - values.begin());
}

}  // namespace mma::sampling

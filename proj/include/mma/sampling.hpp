#pragma once

#include <span>
#include <vector>

#include "mma/random.hpp"

namespace mma::sampling {

std::vector<double> softmax_with_temperature(std::span<const double> logits, double temperature);

// Smallest probability-descending prefix (ties by lower id) whose mass reaches
// top_p; never empty, so top_p -> 0+ degenerates to argmax.
std::vector<int> nucleus_set(std::span<const double> probs, double top_p);

// Temperature, nucleus truncation, renormalisation, one draw.
int sample_top_p(std::span<const double> logits, double temperature, double top_p, Rng& rng);

int argmax(std::span<const double> values);

}  // namespace mma::sampling

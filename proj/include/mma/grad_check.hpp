#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mma/tensor.hpp"

namespace mma {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<GradCheckEntry> entries;  // one per parameter tensor
  std::size_t coordinates = 0;

  const GradCheckEntry& worst() const;
};

using LossFn = std::function<Tensor()>;

/// Central finite differences against reverse-mode gradients.
///
/// `loss` is evaluated once under a fresh tape for the analytic gradient and
/// twice per coordinate (x +/- eps) with recording off. The error for one
/// coordinate is |a - n| / max(1e-8, |a| + |n|). Parameter values are
/// restored bit-for-bit. eps must lie in (0, 1e-2].
GradCheckReport grad_check(const LossFn& loss, std::span<const NamedTensor> params, double eps);

double grad_check(const LossFn& loss, std::span<const Tensor> params, double eps);

}  // namespace mma

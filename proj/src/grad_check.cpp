#include "mma/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "mma/errors.hpp"
#include "mma/random.hpp"

namespace mma {

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  // splitmix64 finalizer over the pair
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

const GradCheckEntry& GradCheckReport::worst() const {
  if (entries.empty()) throw DomainError("empty gradient-check report");
  return *std::max_element(entries.begin(), entries.end(),
                           [](const GradCheckEntry& a, const GradCheckEntry& b) {
                             return a.max_rel_error < b.max_rel_error;
                           });
}

GradCheckReport grad_check(const LossFn& loss, std::span<const NamedTensor> params, double eps) {
  if (!(eps > 0.0) || eps > 1e-2) {
    throw DomainError("grad_check eps must lie in (0, 1e-2], got " + std::to_string(eps));
  }

  std::vector<bool> saved_flags;
  for (const NamedTensor& p : params) {
    saved_flags.push_back(p.tensor.requires_grad());
    Tensor t = p.tensor;
    t.set_requires_grad(true);
    t.zero_grad();
  }

  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor value;
    {
      TapeScope scope(tape);
      value = loss();
    }
    tape.backward(value);
    for (const NamedTensor& p : params) {
      auto g = p.tensor.grad();
      analytic.emplace_back(g.begin(), g.end());
    }
    tape.clear();
  }

  GradCheckReport report;
  NoGradScope no_grad;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor t = params[pi].tensor;
    GradCheckEntry entry{params[pi].name};
    auto values = t.data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + eps;
      const double plus = loss().item();
      values[i] = original - eps;
      const double minus = loss().item();
      values[i] = original;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = analytic[pi][i];
      const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      if (i == 0 || err > entry.max_rel_error) {
        entry.max_rel_error = err;
        entry.worst_index = i;
        entry.analytic = a;
        entry.numeric = numeric;
      }
      ++report.coordinates;
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(entry);
  }

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor t = params[pi].tensor;
    t.zero_grad();
    t.set_requires_grad(saved_flags[pi]);
  }
  return report;
}

double grad_check(const LossFn& loss, std::span<const Tensor> params, double eps) {
  std::vector<NamedTensor> named;
  named.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    named.push_back({"param" + std::to_string(i), params[i]});
  }
  return grad_check(loss, named, eps).max_rel_error;
}

}  // namespace mma

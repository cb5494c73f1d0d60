#pragma once
// Modality tokens, the temperature-softmax router and the adapters that use
// it. All adapter paths are linear bottlenecks, so a routed adapter with a
// fixed modality collapses to a single [c, c] matrix (see merge_for_modality).

#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "mma/grad_check.hpp"
#include "mma/random.hpp"
#include "mma/tensor.hpp"

namespace mma {

enum class ModalityTag { TextOnly = 0, TextImage = 1 };

// TextOnly -> [1, 0], TextImage -> [0, 1].
std::array<double, 2> one_hot(ModalityTag tag);
std::string_view modality_name(ModalityTag tag);  // "text" / "image"
ModalityTag parse_modality(std::string_view name);

struct ModalityEmbedding {
  Tensor table;  // [2, c], trainable

  std::size_t width() const { return table.dim(1); }
  // table ~ N(0, 0.02)
  static ModalityEmbedding init(std::size_t width, Rng& rng);
};

// t_m = m . E_m, returned as a [1, c] row.
Tensor modality_token(ModalityTag tag, const ModalityEmbedding& emb);

struct Router {
  Tensor weight;  // [c, 2]
  Tensor bias;    // [2]
  double tau = 10.0;

  static Router init(std::size_t width, double tau);
};

// softmax((t_m W_m + b_m) / tau) as a [1, 2] row. Depends on t_m only.
Tensor routing_weights(const Tensor& t_m, const Router& router);

struct MMAdapter {
  Tensor down;  // [c, r], shared by both paths
  Tensor up1;   // [r, c]
  Tensor up2;   // [r, c]
  Router router;
  double scale = 1.0;

  std::size_t width() const { return down.dim(0); }
  std::size_t rank() const { return down.dim(1); }

  // down ~ U(+-1/sqrt(c)), up1 = up2 = 0, router zero. The router reads a
  // modality token of `router_width` (0 means the adapter width).
  static MMAdapter init(std::size_t width, std::size_t rank, double tau, double scale, Rng& rng,
                        std::size_t router_width = 0);
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

// Z' = Z + s (w0 Z down up1 + w1 Z down up2), one routing pair for every row.
Tensor mm_adapter_forward(const MMAdapter& adapter, const Tensor& z, const Tensor& t_m);
// Same, with routing weights already computed by routing_weights.
Tensor mm_adapter_apply(const MMAdapter& adapter, const Tensor& z, const Tensor& weights);

struct PlainAdapter {
  Tensor down;  // [c', r]
  Tensor up;    // [r, c']
  double scale = 1.0;

  std::size_t width() const { return down.dim(0); }
  std::size_t rank() const { return down.dim(1); }

  static PlainAdapter init(std::size_t width, std::size_t rank, double scale, Rng& rng);
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

// x + s x down up
Tensor plain_adapter_forward(const PlainAdapter& adapter, const Tensor& x);

struct MergedAdapter {
  Tensor combined;  // [c, c] = I + s down (w0 up1 + w1 up2)
  ModalityTag modality = ModalityTag::TextOnly;

  Tensor apply(const Tensor& z) const;
};

MergedAdapter merge_for_modality(const MMAdapter& adapter, ModalityTag tag,
                                 const ModalityEmbedding& emb);

}  // namespace mma

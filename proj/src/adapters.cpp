#include "mma/adapters.hpp"

#include <cmath>

#include "mma/errors.hpp"
#include "mma/ops.hpp"

namespace mma {

std::array<double, 2> one_hot(ModalityTag tag) {
  return tag == ModalityTag::TextOnly ? std::array<double, 2>{1.0, 0.0}
                                      : std::array<double, 2>{0.0, 1.0};
}

std::string_view modality_name(ModalityTag tag) {
  return tag == ModalityTag::TextOnly ? "text" : "image";
}

ModalityTag parse_modality(std::string_view name) {
  if (name == "text") return ModalityTag::TextOnly;
  if (name == "image") return ModalityTag::TextImage;
  throw DomainError("modality must be 'text' or 'image', got '" + std::string(name) + "'");
}

ModalityEmbedding ModalityEmbedding::init(std::size_t width, Rng& rng) {
  std::vector<double> values(2 * width);
  for (double& v : values) v = rng.normal(0.0, 0.02);
  return {Tensor({2, width}, std::move(values), true)};
}

Tensor modality_token(ModalityTag tag, const ModalityEmbedding& emb) {
  const int row = static_cast<int>(tag);
  return ops::gather_rows(emb.table, std::span<const int>(&row, 1));
}

Router Router::init(std::size_t width, double tau) {
  if (!(tau > 0.0)) throw DomainError("router temperature must be positive");
  return {Tensor({width, 2}, true), Tensor({2}, true), tau};
}

Tensor routing_weights(const Tensor& t_m, const Router& router) {
  if (!(router.tau > 0.0)) throw DomainError("router temperature must be positive");
  const Tensor logits = ops::add_bias(ops::matmul(t_m, router.weight), router.bias);
  return ops::softmax(logits, router.tau);
}

MMAdapter MMAdapter::init(std::size_t width, std::size_t rank, double tau, double scale,
                          Rng& rng, std::size_t router_width) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(width));
  std::vector<double> down(width * rank);
  for (double& v : down) v = rng.uniform(-bound, bound);
  MMAdapter adapter;
  adapter.down = Tensor({width, rank}, std::move(down), true);
  adapter.up1 = Tensor({rank, width}, true);
  adapter.up2 = Tensor({rank, width}, true);
  adapter.router = Router::init(router_width ? router_width : width, tau);
  adapter.scale = scale;
  return adapter;
}

void MMAdapter::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({prefix + "down", down});
  out.push_back({prefix + "up1", up1});
  out.push_back({prefix + "up2", up2});
  out.push_back({prefix + "router.weight", router.weight});
  out.push_back({prefix + "router.bias", router.bias});
}

Tensor mm_adapter_apply(const MMAdapter& adapter, const Tensor& z, const Tensor& weights) {
  if (z.rank() != 2 || z.cols() != adapter.width()) {
    throw ShapeMismatch("mm-adapter: input " + shape_str(z.shape()) + " for width " +
                        std::to_string(adapter.width()));
  }
  if (weights.numel() != 2) throw ShapeMismatch("mm-adapter: routing weights must have 2 entries");
  const Tensor hidden = ops::matmul(z, adapter.down);
  const Tensor w = ops::reshape(weights, {1, 2});
  const Tensor path1 = ops::mul(ops::slice_cols(w, 0, 1), ops::matmul(hidden, adapter.up1));
  const Tensor path2 = ops::mul(ops::slice_cols(w, 1, 1), ops::matmul(hidden, adapter.up2));
  return ops::add(z, ops::scale(ops::add(path1, path2), adapter.scale));
}

Tensor mm_adapter_forward(const MMAdapter& adapter, const Tensor& z, const Tensor& t_m) {
  if (t_m.numel() != adapter.router.weight.dim(0)) {
    throw ShapeMismatch("mm-adapter: modality token " + shape_str(t_m.shape()) +
                        " for router width " + std::to_string(adapter.router.weight.dim(0)));
  }
  return mm_adapter_apply(adapter, z, routing_weights(ops::reshape(t_m, {1, t_m.numel()}),
                                                      adapter.router));
}

PlainAdapter PlainAdapter::init(std::size_t width, std::size_t rank, double scale, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(width));
  std::vector<double> down(width * rank);
  for (double& v : down) v = rng.uniform(-bound, bound);
  return {Tensor({width, rank}, std::move(down), true), Tensor({rank, width}, true), scale};
}

void PlainAdapter::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({prefix + "down", down});
  out.push_back({prefix + "up", up});
}

Tensor plain_adapter_forward(const PlainAdapter& adapter, const Tensor& x) {
  if (x.rank() != 2 || x.cols() != adapter.width()) {
    throw ShapeMismatch("adapter: input " + shape_str(x.shape()) + " for width " +
                        std::to_string(adapter.width()));
  }
  const Tensor delta = ops::matmul(ops::matmul(x, adapter.down), adapter.up);
  return ops::add(x, ops::scale(delta, adapter.scale));
}

Tensor MergedAdapter::apply(const Tensor& z) const { return ops::matmul(z, combined); }

MergedAdapter merge_for_modality(const MMAdapter& adapter, ModalityTag tag,
                                 const ModalityEmbedding& emb) {
  NoGradScope no_grad;
  const Tensor w = routing_weights(modality_token(tag, emb), adapter.router);
  const double w0 = w.at(0), w1 = w.at(1);
  const std::size_t c = adapter.width(), r = adapter.rank();

  std::vector<double> mixed(r * c);
  auto u1 = adapter.up1.data();
  auto u2 = adapter.up2.data();
  for (std::size_t i = 0; i < r * c; ++i) mixed[i] = w0 * u1[i] + w1 * u2[i];
  const Tensor product = ops::matmul(adapter.down, Tensor({r, c}, std::move(mixed)));

  std::vector<double> combined(c * c);
  auto p = product.data();
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      combined[i * c + j] = (i == j ? 1.0 : 0.0) + adapter.scale * p[i * c + j];
    }
  }
  return {Tensor({c, c}, std::move(combined)), tag};
}

}  // namespace mma

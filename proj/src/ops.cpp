#include "mma/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mma/errors.hpp"
#include "mma/kernels.hpp"

namespace mma::ops {
namespace {

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (active_tape() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ShapeMismatch(std::string(op) + ": undefined tensor");
}

void require_rank2(const Tensor& t, const char* op) {
  require_defined(t, op);
  if (t.rank() != 2) {
    throw ShapeMismatch(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
  }
}

void check_finite(const Tensor& out, const char* op) {
  for (double v : out.data()) {
    if (!std::isfinite(v)) throw NumericOverflow(std::string(op) + " produced a non-finite value");
  }
}

void record(const char* op, std::vector<Tensor> inputs, const Tensor& out, Tape::BackwardFn fn) {
  active_tape()->record(op, std::move(inputs), out, std::move(fn));
}

const kernels::KernelTable& K() { return kernels::active(); }

enum class Broadcast { Same, ScalarA, ScalarB };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() == b.shape()) return Broadcast::Same;
  if (a.numel() == 1) return Broadcast::ScalarA;
  if (b.numel() == 1) return Broadcast::ScalarB;
  throw ShapeMismatch(std::string(op) + ": " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
}

// Elementwise unary op: value f(x) and derivative df(x, y).
template <typename F, typename D>
Tensor unary(const char* op, const Tensor& a, F f, D df) {
  require_defined(a, op);
  const bool track = tracking({&a});
  Tensor out(a.shape(), track);
  auto x = a.data();
  auto y = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  check_finite(out, op);
  if (track) {
    record(op, {a}, out, [a, out, df]() {
      auto x = a.data();
      auto y = out.data();
      auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
    });
  }
  return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeMismatch("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const bool track = tracking({&a, &b});
  Tensor out({m, n}, track);
  K().gemm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  check_finite(out, "matmul");
  if (track) {
    record("matmul", {a, b}, out, [a, b, out, m, k, n]() {
      const double* g = out.grad().data();
      if (a.requires_grad()) K().gemm_nt(g, b.data().data(), a.grad().data(), m, n, k);
      if (b.requires_grad()) K().gemm_tn(a.data().data(), g, b.grad().data(), k, m, n);
    });
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw ShapeMismatch("matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                        "^T");
  }
  const bool track = tracking({&a, &b});
  Tensor out({m, n}, track);
  K().gemm_nt(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  check_finite(out, "matmul_nt");
  if (track) {
    record("matmul_nt", {a, b}, out, [a, b, out, m, k, n]() {
      const double* g = out.grad().data();
      if (a.requires_grad()) K().gemm_nn(g, b.data().data(), a.grad().data(), m, n, k);
      if (b.requires_grad()) K().gemm_tn(g, a.data().data(), b.grad().data(), n, m, k);
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  const bool track = tracking({&a});
  Tensor out({n, m}, track);
  auto x = a.data();
  auto y = out.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[j * m + i] = x[i * n + j];
  if (track) {
    record("transpose", {a}, out, [a, out, m, n]() {
      auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  if (shape_numel(shape) != a.numel()) {
    throw ShapeMismatch("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  const bool track = tracking({&a});
  Tensor out(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()), track);
  if (track) {
    record("reshape", {a}, out, [a, out]() {
      auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

namespace {

// sign = +1 for add, -1 for sub.
Tensor add_sub(const char* op, const Tensor& a, const Tensor& b, double sign) {
  const Broadcast kind = broadcast_kind(a, b, op);
  const bool track = tracking({&a, &b});
  const Shape& shape = kind == Broadcast::ScalarA ? b.shape() : a.shape();
  Tensor out(shape, track);
  auto x = a.data();
  auto z = b.data();
  auto y = out.data();
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double av = kind == Broadcast::ScalarA ? x[0] : x[i];
    const double bv = kind == Broadcast::ScalarB ? z[0] : z[i];
    y[i] = av + sign * bv;
  }
  check_finite(out, op);
  if (track) {
    record(op, {a, b}, out, [a, b, out, kind, sign]() {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[kind == Broadcast::ScalarA ? 0 : i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i)
          gb[kind == Broadcast::ScalarB ? 0 : i] += sign * g[i];
      }
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return add_sub("add", a, b, 1.0); }
Tensor sub(const Tensor& a, const Tensor& b) { return add_sub("sub", a, b, -1.0); }

Tensor mul(const Tensor& a, const Tensor& b) {
  const Broadcast kind = broadcast_kind(a, b, "mul");
  const bool track = tracking({&a, &b});
  const Shape& shape = kind == Broadcast::ScalarA ? b.shape() : a.shape();
  Tensor out(shape, track);
  auto x = a.data();
  auto z = b.data();
  auto y = out.data();
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] = x[kind == Broadcast::ScalarA ? 0 : i] * z[kind == Broadcast::ScalarB ? 0 : i];
  }
  check_finite(out, "mul");
  if (track) {
    record("mul", {a, b}, out, [a, b, out, kind]() {
      auto g = out.grad();
      auto x = a.data();
      auto z = b.data();
      const std::size_t ia = kind == Broadcast::ScalarA ? 0 : 1;
      const std::size_t ib = kind == Broadcast::ScalarB ? 0 : 1;
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i * ia] += g[i] * z[i * ib];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i * ib] += g[i] * x[i * ia];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_defined(x, "add_bias");
  require_defined(bias, "add_bias");
  const std::size_t width = x.cols();
  if (bias.numel() != width) {
    throw ShapeMismatch("add_bias: " + shape_str(x.shape()) + " + " + shape_str(bias.shape()));
  }
  const bool track = tracking({&x, &bias});
  Tensor out(x.shape(), track);
  auto xv = x.data();
  auto bv = bias.data();
  auto y = out.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] + bv[i % width];
  check_finite(out, "add_bias");
  if (track) {
    record("add_bias", {x, bias}, out, [x, bias, out, width]() {
      auto g = out.grad();
      if (x.requires_grad()) {
        auto gx = x.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % width] += g[i];
      }
    });
  }
  return out;
}

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  require_defined(a, "log");
  for (double v : a.data()) {
    if (!(v > 0.0)) throw DomainError("log of a non-positive value");
  }
  return unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      "sigmoid", a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& a) {
  return unary(
      "silu", a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  const bool track = tracking({&a});
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  Tensor out = Tensor::scalar(acc, track);
  check_finite(out, "sum");
  if (track) {
    record("sum", {a}, out, [a, out]() {
      const double g = out.grad()[0];
      for (double& ga : a.grad()) ga += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& a) {
  require_defined(a, "mean");
  const bool track = tracking({&a});
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  const double n = static_cast<double>(a.numel());
  Tensor out = Tensor::scalar(acc / n, track);
  check_finite(out, "mean");
  if (track) {
    record("mean", {a}, out, [a, out, n]() {
      const double g = out.grad()[0] / n;
      for (double& ga : a.grad()) ga += g;
    });
  }
  return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeMismatch("concat_rows: no inputs");
  const std::size_t width = parts[0].cols();
  std::size_t total = 0;
  bool track = false;
  for (const Tensor& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.cols() != width) throw ShapeMismatch("concat_rows: column counts differ");
    total += p.rows();
    track = track || tracking({&p});
  }
  Tensor out({total, width}, track);
  auto y = out.data();
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    std::copy(p.data().begin(), p.data().end(), y.begin() + static_cast<std::ptrdiff_t>(offset));
    offset += p.numel();
  }
  if (track) {
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    record("concat_rows", inputs, out, [inputs, out]() {
      auto g = out.grad();
      std::size_t offset = 0;
      for (const Tensor& p : inputs) {
        if (p.requires_grad()) {
          auto gp = p.grad();
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offset + i];
        }
        offset += p.numel();
      }
    });
  }
  return out;
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeMismatch("concat_cols: no inputs");
  const std::size_t rows = parts[0].rows();
  std::size_t total = 0;
  bool track = false;
  for (const Tensor& p : parts) {
    require_rank2(p, "concat_cols");
    if (p.rows() != rows) throw ShapeMismatch("concat_cols: row counts differ");
    total += p.cols();
    track = track || tracking({&p});
  }
  Tensor out({rows, total}, track);
  auto y = out.data();
  std::size_t col = 0;
  for (const Tensor& p : parts) {
    const std::size_t w = p.cols();
    auto x = p.data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < w; ++j) y[r * total + col + j] = x[r * w + j];
    col += w;
  }
  if (track) {
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    record("concat_cols", inputs, out, [inputs, out, rows, total]() {
      auto g = out.grad();
      std::size_t col = 0;
      for (const Tensor& p : inputs) {
        const std::size_t w = p.cols();
        if (p.requires_grad()) {
          auto gp = p.grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < w; ++j) gp[r * w + j] += g[r * total + col + j];
        }
        col += w;
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  require_rank2(x, "slice_rows");
  if (count == 0 || begin + count > x.rows()) {
    throw ShapeMismatch("slice_rows: [" + std::to_string(begin) + ", +" + std::to_string(count) +
                        ") of " + shape_str(x.shape()));
  }
  const std::size_t w = x.cols();
  const bool track = tracking({&x});
  const auto first = x.data().begin() + static_cast<std::ptrdiff_t>(begin * w);
  Tensor out({count, w}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(count * w)),
             track);
  if (track) {
    record("slice_rows", {x}, out, [x, out, begin, w]() {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[begin * w + i] += g[i];
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  require_rank2(x, "slice_cols");
  if (count == 0 || begin + count > x.cols()) {
    throw ShapeMismatch("slice_cols: [" + std::to_string(begin) + ", +" + std::to_string(count) +
                        ") of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.rows(), w = x.cols();
  const bool track = tracking({&x});
  Tensor out({rows, count}, track);
  auto xv = x.data();
  auto y = out.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < count; ++j) y[r * count + j] = xv[r * w + begin + j];
  if (track) {
    record("slice_cols", {x}, out, [x, out, begin, count, rows, w]() {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < count; ++j) gx[r * w + begin + j] += g[r * count + j];
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  require_rank2(table, "gather_rows");
  if (ids.empty()) throw ShapeMismatch("gather_rows: empty id list");
  const std::size_t vocab = table.rows(), w = table.cols();
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw TokenOutOfRange("id " + std::to_string(id) + " outside table of " +
                            std::to_string(vocab) + " rows");
    }
  }
  const bool track = tracking({&table});
  Tensor out({ids.size(), w}, track);
  auto src = table.data();
  auto y = out.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const std::size_t row = static_cast<std::size_t>(ids[i]);
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(row * w), w,
                y.begin() + static_cast<std::ptrdiff_t>(i * w));
  }
  if (track) {
    std::vector<int> rows(ids.begin(), ids.end());
    record("gather_rows", {table}, out, [table, out, rows = std::move(rows), w]() {
      auto g = out.grad();
      auto gt = table.grad();
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const std::size_t row = static_cast<std::size_t>(rows[i]);
        for (std::size_t j = 0; j < w; ++j) gt[row * w + j] += g[i * w + j];
      }
    });
  }
  return out;
}

Tensor softmax(const Tensor& x, double temperature, SoftmaxMask mask) {
  require_defined(x, "softmax");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw DomainError("softmax temperature must be positive and finite, got " +
                      std::to_string(temperature));
  }
  if (mask == SoftmaxMask::Causal) require_rank2(x, "softmax");
  const std::size_t n = x.cols(), rows = x.rows();
  const bool track = tracking({&x});
  Tensor out(x.shape(), track);
  auto xv = x.data();
  auto y = out.data();
  const double inv_t = 1.0 / temperature;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t live = mask == SoftmaxMask::Causal ? std::min(n, r + 1) : n;
    const double* in = xv.data() + r * n;
    double* o = y.data() + r * n;
    double top = in[0] * inv_t;
    for (std::size_t j = 1; j < live; ++j) top = std::max(top, in[j] * inv_t);
    double total = 0.0;
    for (std::size_t j = 0; j < live; ++j) {
      o[j] = std::exp(in[j] * inv_t - top);
      total += o[j];
    }
    for (std::size_t j = 0; j < live; ++j) o[j] /= total;
  }
  check_finite(out, "softmax");
  if (track) {
    record("softmax", {x}, out, [x, out, n, rows, inv_t]() {
      auto y = out.grad();
      auto p = out.data();
      auto gx = x.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* pr = p.data() + r * n;
        const double* gr = y.data() + r * n;
        double inner = 0.0;
        for (std::size_t j = 0; j < n; ++j) inner += gr[j] * pr[j];
        for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += inv_t * pr[j] * (gr[j] - inner);
      }
    });
  }
  return out;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 bool causal, std::vector<double>* probs) {
  require_rank2(q, "attention");
  require_rank2(k, "attention");
  require_rank2(v, "attention");
  if (q.shape() != k.shape() || q.shape() != v.shape()) {
    throw ShapeMismatch("attention: q/k/v shapes differ");
  }
  const std::size_t len = q.rows(), width = q.cols();
  if (heads == 0 || width % heads != 0) {
    throw ShapeMismatch("attention: width " + std::to_string(width) + " not divisible by " +
                        std::to_string(heads) + " heads");
  }
  const std::size_t hd = width / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const bool track = tracking({&q, &k, &v});
  Tensor out({len, width}, track);

  // p[h][i][j], zero above the diagonal when causal.
  std::vector<double> p(heads * len * len, 0.0);
  auto qv = q.data();
  auto kv = k.data();
  auto vv = v.data();
  auto y = out.data();
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * hd;
    for (std::size_t i = 0; i < len; ++i) {
      const std::size_t live = causal ? i + 1 : len;
      double* pr = p.data() + (h * len + i) * len;
      double top = 0.0;
      for (std::size_t j = 0; j < live; ++j) {
        double s = 0.0;
        for (std::size_t e = 0; e < hd; ++e) s += qv[i * width + off + e] * kv[j * width + off + e];
        pr[j] = s * inv_sqrt;
        top = j == 0 ? pr[j] : std::max(top, pr[j]);
      }
      double total = 0.0;
      for (std::size_t j = 0; j < live; ++j) {
        pr[j] = std::exp(pr[j] - top);
        total += pr[j];
      }
      for (std::size_t j = 0; j < live; ++j) pr[j] /= total;
      for (std::size_t j = 0; j < live; ++j) {
        const double w = pr[j];
        for (std::size_t e = 0; e < hd; ++e) y[i * width + off + e] += w * vv[j * width + off + e];
      }
    }
  }
  check_finite(out, "attention");
  if (probs != nullptr) *probs = p;
  if (track) {
    record("attention", {q, k, v}, out,
           [q, k, v, out, p = std::move(p), heads, len, width, hd, inv_sqrt, causal]() {
             auto g = out.grad();
             auto qv = q.data();
             auto kv = k.data();
             auto vv = v.data();
             std::vector<double> dq(len * width, 0.0), dk(len * width, 0.0), dv(len * width, 0.0);
             std::vector<double> dp(len);
             for (std::size_t h = 0; h < heads; ++h) {
               const std::size_t off = h * hd;
               for (std::size_t i = 0; i < len; ++i) {
                 const std::size_t live = causal ? i + 1 : len;
                 const double* pr = p.data() + (h * len + i) * len;
                 double inner = 0.0;
                 for (std::size_t j = 0; j < live; ++j) {
                   double s = 0.0;
                   for (std::size_t e = 0; e < hd; ++e) {
                     s += g[i * width + off + e] * vv[j * width + off + e];
                     dv[j * width + off + e] += pr[j] * g[i * width + off + e];
                   }
                   dp[j] = s;
                   inner += s * pr[j];
                 }
                 for (std::size_t j = 0; j < live; ++j) {
                   const double ds = pr[j] * (dp[j] - inner) * inv_sqrt;
                   for (std::size_t e = 0; e < hd; ++e) {
                     dq[i * width + off + e] += ds * kv[j * width + off + e];
                     dk[j * width + off + e] += ds * qv[i * width + off + e];
                   }
                 }
               }
             }
             auto accumulate = [](const Tensor& t, const std::vector<double>& d) {
               if (!t.requires_grad()) return;
               auto gt = t.grad();
               for (std::size_t i = 0; i < d.size(); ++i) gt[i] += d[i];
             };
             accumulate(q, dq);
             accumulate(k, dk);
             accumulate(v, dv);
           });
  }
  return out;
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
  require_defined(x, "rms_norm");
  require_defined(gain, "rms_norm");
  if (eps < 0.0) throw DomainError("rms_norm eps must be non-negative");
  const std::size_t w = x.cols(), rows = x.rows();
  if (gain.numel() != w) {
    throw ShapeMismatch("rms_norm: gain " + shape_str(gain.shape()) + " for rows of width " +
                        std::to_string(w));
  }
  const bool track = tracking({&x, &gain});
  Tensor out(x.shape(), track);
  std::vector<double> inv_rms(rows);
  auto xv = x.data();
  auto gv = gain.data();
  auto y = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * w;
    double ms = 0.0;
    for (std::size_t j = 0; j < w; ++j) ms += in[j] * in[j];
    ms /= static_cast<double>(w);
    inv_rms[r] = 1.0 / std::sqrt(ms + eps);
    for (std::size_t j = 0; j < w; ++j) y[r * w + j] = in[j] * inv_rms[r] * gv[j];
  }
  check_finite(out, "rms_norm");
  if (track) {
    record("rms_norm", {x, gain}, out, [x, gain, out, inv_rms = std::move(inv_rms), w, rows]() {
      auto g = out.grad();
      auto xv = x.data();
      auto gv = gain.data();
      const double inv_w = 1.0 / static_cast<double>(w);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xv.data() + r * w;
        const double* go = g.data() + r * w;
        const double s = inv_rms[r];
        if (x.requires_grad()) {
          double inner = 0.0;
          for (std::size_t j = 0; j < w; ++j) inner += go[j] * gv[j] * in[j];
          auto gx = x.grad();
          const double c = s * s * s * inv_w * inner;
          for (std::size_t j = 0; j < w; ++j) gx[r * w + j] += s * go[j] * gv[j] - c * in[j];
        }
        if (gain.requires_grad()) {
          auto gg = gain.grad();
          for (std::size_t j = 0; j < w; ++j) gg[j] += go[j] * in[j] * s;
        }
      }
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const std::uint8_t> mask) {
  require_rank2(logits, "cross_entropy");
  const std::size_t rows = logits.rows(), vocab = logits.cols();
  if (targets.size() != rows || mask.size() != rows) {
    throw ShapeMismatch("cross_entropy: " + std::to_string(rows) + " logit rows, " +
                        std::to_string(targets.size()) + " targets, " +
                        std::to_string(mask.size()) + " mask entries");
  }
  std::size_t active = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    ++active;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw TokenOutOfRange("target " + std::to_string(targets[r]));
    }
  }
  if (active == 0) throw EmptyMask("cross_entropy needs at least one labelled position");

  auto lv = logits.data();
  std::vector<double> probs(rows * vocab, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    const double* row = lv.data() + r * vocab;
    const double top = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - top);
    const double lse = top + std::log(z);
    total += lse - row[targets[r]];
    for (std::size_t j = 0; j < vocab; ++j) probs[r * vocab + j] = std::exp(row[j] - lse);
  }
  const double inv_n = 1.0 / static_cast<double>(active);
  const bool track = tracking({&logits});
  Tensor out = Tensor::scalar(total * inv_n, track);
  check_finite(out, "cross_entropy");
  if (track) {
    std::vector<int> t(targets.begin(), targets.end());
    std::vector<char> m(mask.begin(), mask.end());
    record("cross_entropy", {logits}, out,
           [logits, out, probs = std::move(probs), t = std::move(t), m = std::move(m), vocab,
            inv_n]() {
             const double g = out.grad()[0] * inv_n;
             auto gl = logits.grad();
             for (std::size_t r = 0; r < t.size(); ++r) {
               if (!m[r]) continue;
               for (std::size_t j = 0; j < vocab; ++j) gl[r * vocab + j] += g * probs[r * vocab + j];
               gl[r * vocab + static_cast<std::size_t>(t[r])] -= g;
             }
           });
  }
  return out;
}

}  // namespace mma::ops

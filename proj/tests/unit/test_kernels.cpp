#include <cmath>
#include <vector>

#include "doctest.h"
#include "mma/kernels.hpp"
#include "mma/random.hpp"

using namespace mma;

namespace {

std::vector<double> random_vec(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

double max_rel_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(1.0, std::abs(a[i])));
  }
  return worst;
}

}  // namespace

TEST_SUITE("kernels") {

TEST_CASE("scalar gemm against a naive triple loop") {
  const auto& k = kernels::scalar_table();
  const std::vector<double> a{1, 2, 3, 4, 5, 6};  // 2x3
  const std::vector<double> b{7, 8, 9, 10, 11, 12};  // 3x2
  std::vector<double> c(4, 1.0);
  k.gemm_nn(a.data(), b.data(), c.data(), 2, 3, 2);
  CHECK(c == std::vector<double>{59, 65, 140, 155});
}

TEST_CASE("avx2 kernels agree with scalar kernels") {
  const kernels::KernelTable* fast = kernels::avx2_table();
  if (fast == nullptr) {
    MESSAGE("AVX2 unavailable, nothing to compare");
    return;
  }
  const auto& ref = kernels::scalar_table();
  Rng rng(17);
  const std::size_t sizes[][3] = {{1, 1, 1}, {3, 5, 7}, {4, 4, 4}, {16, 64, 64}, {17, 33, 9}, {1, 64, 53}, {48, 16, 64}};
  for (const auto& s : sizes) {
    const std::size_t m = s[0], kk = s[1], n = s[2];
    CAPTURE(m);
    CAPTURE(kk);
    CAPTURE(n);
    const auto a = random_vec(m * kk, rng);
    const auto b = random_vec(kk * n, rng);
    const auto bt = random_vec(n * kk, rng);
    const auto at = random_vec(kk * m, rng);
    const auto c0 = random_vec(m * n, rng);
    auto c1 = c0, c2 = c0;
    ref.gemm_nn(a.data(), b.data(), c1.data(), m, kk, n);
    fast->gemm_nn(a.data(), b.data(), c2.data(), m, kk, n);
    CHECK(max_rel_diff(c1, c2) < 1e-13);
    c1 = c0, c2 = c0;
    ref.gemm_nt(a.data(), bt.data(), c1.data(), m, kk, n);
    fast->gemm_nt(a.data(), bt.data(), c2.data(), m, kk, n);
    CHECK(max_rel_diff(c1, c2) < 1e-13);
    c1 = c0, c2 = c0;
    ref.gemm_tn(at.data(), b.data(), c1.data(), m, kk, n);
    fast->gemm_tn(at.data(), b.data(), c2.data(), m, kk, n);
    CHECK(max_rel_diff(c1, c2) < 1e-13);
  }
  for (std::size_t n : {1u, 3u, 4u, 15u, 64u, 257u}) {
    const auto x = random_vec(n, rng);
    const auto y = random_vec(n, rng);
    CHECK(std::abs(ref.dot(x.data(), y.data(), n) - fast->dot(x.data(), y.data(), n)) < 1e-12);
    auto y1 = y, y2 = y;
    ref.axpy(0.37, x.data(), y1.data(), n);
    fast->axpy(0.37, x.data(), y2.data(), n);
    CHECK(max_rel_diff(y1, y2) < 1e-15);
  }
}

TEST_CASE("selection and parsing") {
  CHECK(kernels::parse_isa("scalar") == kernels::Isa::Scalar);
  CHECK(kernels::parse_isa("avx2") == kernels::Isa::Avx2);
  CHECK_THROWS(kernels::parse_isa("neon"));
  const kernels::KernelTable* before = &kernels::active();
  kernels::select(kernels::Isa::Scalar);
  CHECK(&kernels::active() == &kernels::scalar_table());
  if (kernels::avx2_table() != nullptr) {
    kernels::select(kernels::Isa::Avx2);
    CHECK(&kernels::active() == kernels::avx2_table());
  }
  if (before == &kernels::scalar_table()) kernels::select(kernels::Isa::Scalar);
}

}

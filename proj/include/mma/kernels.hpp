#pragma once
// Dense double-precision inner loops used by the tensor ops.
//
// Every kernel has a portable scalar reference and, on x86-64, an AVX2+FMA
// variant. The active table is picked once at startup from CPUID and can be
// forced with MMA_KERNELS=scalar|avx2. All matrices are row-major and
// contiguous; every gemm accumulates into c.

#include <cstddef>
#include <string_view>

namespace mma::kernels {

enum class Isa { Scalar, Avx2 };

struct KernelTable {
  const char* name;
  Isa isa;
  // c[m x n] += a[m x k] * b[k x n]
  void (*gemm_nn)(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                  std::size_t n);
  // c[m x n] += a[m x k] * b[n x k]^T
  void (*gemm_nt)(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                  std::size_t n);
  // c[m x n] += a[k x m]^T * b[k x n]
  void (*gemm_tn)(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                  std::size_t n);
  double (*dot)(const double* x, const double* y, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
};

const KernelTable& scalar_table();

// nullptr when the build or the CPU lacks AVX2/FMA.
const KernelTable* avx2_table();

bool cpu_has_avx2();

// Table used by the tensor ops.
const KernelTable& active();

// Overrides the startup choice; throws DomainError if the ISA is unavailable.
void select(Isa isa);

Isa parse_isa(std::string_view name);

}  // namespace mma::kernels

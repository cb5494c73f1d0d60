#include <atomic>
#include <cstdlib>
#include <string>

#include "mma/errors.hpp"
#include "mma/kernels.hpp"

namespace mma::kernels {
namespace {

const KernelTable* startup_choice() {
  if (const char* env = std::getenv("MMA_KERNELS")) {
    if (parse_isa(env) == Isa::Scalar) return &scalar_table();
  }
  if (const KernelTable* t = avx2_table()) return t;
  return &scalar_table();
}

std::atomic<const KernelTable*>& current() {
  static std::atomic<const KernelTable*> table{startup_choice()};
  return table;
}

}  // namespace

bool cpu_has_avx2() {
#if defined(__x86_64__) && (defined(__GNUC__) || defined(__clang__))
  static const bool has = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  return has;
#else
  return false;
#endif
}

const KernelTable& active() { return *current().load(std::memory_order_relaxed); }

void select(Isa isa) {
  if (isa == Isa::Scalar) {
    current().store(&scalar_table());
    return;
  }
  const KernelTable* t = avx2_table();
  if (t == nullptr) throw DomainError("AVX2/FMA kernels are not available on this CPU/build");
  current().store(t);
}

Isa parse_isa(std::string_view name) {
  if (name == "scalar") return Isa::Scalar;
  if (name == "avx2") return Isa::Avx2;
  throw DomainError("unknown kernel ISA '" + std::string(name) + "'");
}

}  // namespace mma::kernels

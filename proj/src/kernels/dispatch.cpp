#include <cstdlib>
#include <cstring>

#include "tss/kernels.hpp"

namespace tss::kernels {
namespace {

Isa DetectIsa() {
  const char* forced = std::getenv("TSS_KERNELS");
  if (forced != nullptr && std::strcmp(forced, "scalar") == 0) {
    return Isa::kScalar;
  }
  return isa_supported(Isa::kAvx2) ? Isa::kAvx2 : Isa::kScalar;
}

Isa& ActiveIsaSlot() {
  static Isa isa = DetectIsa();
  return isa;
}

const KernelTable*& ActiveTableSlot() {
  static const KernelTable* t = &table(ActiveIsaSlot());
  return t;
}

}  // namespace

const char* isa_name(Isa isa) {
  return isa == Isa::kAvx2 ? "avx2" : "scalar";
}

bool isa_supported(Isa isa) {
  if (isa == Isa::kScalar) return true;
#if defined(__x86_64__) && (defined(__GNUC__) || defined(__clang__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const KernelTable& table(Isa isa) {
  return isa == Isa::kAvx2 ? avx2::kTable : scalar::kTable;
}

Isa active_isa() { return ActiveIsaSlot(); }

void set_active_isa(Isa isa) {
  if (!isa_supported(isa)) isa = Isa::kScalar;
  ActiveIsaSlot() = isa;
  ActiveTableSlot() = &table(isa);
}

const KernelTable& active() { return *ActiveTableSlot(); }

void gemm_nn(std::size_t m, std::size_t n, std::size_t p, const double* a,
             const double* b, double* c) {
  const KernelTable& k = active();
  for (std::size_t i = 0; i < m; ++i) {
    double* c_row = c + i * p;
    for (std::size_t r = 0; r < n; ++r) {
      const double s = a[i * n + r];
      if (s != 0.0) k.axpy(s, b + r * p, c_row, p);
    }
  }
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t p, const double* a,
             const double* b, double* c) {
  const KernelTable& k = active();
  for (std::size_t i = 0; i < m; ++i) {
    const double* b_row = b + i * p;
    for (std::size_t r = 0; r < n; ++r) {
      const double s = a[i * n + r];
      if (s != 0.0) k.axpy(s, b_row, c + r * p, p);
    }
  }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t p, const double* a,
             const double* b, double* c) {
  const KernelTable& k = active();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      c[i * n + j] += k.dot(a + i * p, b + j * p, p);
    }
  }
}

}  // namespace tss::kernels

#pragma once
// Dense double-precision inner loops.
//
// Every kernel has a portable scalar reference implementation and an AVX2/FMA
// variant. The variant is picked once at startup from CPUID; setting the
// environment variable TSS_KERNELS=scalar forces the reference path. Both
// tables are always reachable through table(Isa) so tests can compare them.

#include <cstddef>
#include <span>

namespace tss::kernels {

enum class Isa { kScalar, kAvx2 };

struct KernelTable {
  // sum_i a[i] * b[i]
  double (*dot)(const double* a, const double* b, std::size_t n);
  // y[i] += alpha * x[i]
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // out[i] = a[i] + b[i]; out may alias a or b
  void (*add)(const double* a, const double* b, double* out, std::size_t n);
  // out[i] = a[i] * b[i]; out may alias a or b
  void (*mul)(const double* a, const double* b, double* out, std::size_t n);
  // out[i] = g[i] * (1 - a[i]^2); derivative of tanh given its output a
  void (*tanh_grad)(const double* a, const double* g, double* out,
                    std::size_t n);
};

const char* isa_name(Isa isa);
bool isa_supported(Isa isa);
const KernelTable& table(Isa isa);

Isa active_isa();
// Switches the process-wide table. Not thread-safe; intended for tests and
// startup configuration.
void set_active_isa(Isa isa);

const KernelTable& active();

inline double dot(std::span<const double> a, std::span<const double> b) {
  return active().dot(a.data(), b.data(), a.size());
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  active().axpy(alpha, x.data(), y.data(), x.size());
}

// Row-major matrix products accumulating into C.
// C[m x p] += A[m x n] * B[n x p]
void gemm_nn(std::size_t m, std::size_t n, std::size_t p, const double* a,
             const double* b, double* c);
// C[n x p] += A[m x n]^T * B[m x p]
void gemm_tn(std::size_t m, std::size_t n, std::size_t p, const double* a,
             const double* b, double* c);
// C[m x n] += A[m x p] * B[n x p]^T
void gemm_nt(std::size_t m, std::size_t n, std::size_t p, const double* a,
             const double* b, double* c);

namespace scalar {
extern const KernelTable kTable;
}
namespace avx2 {
extern const KernelTable kTable;
}

}  // namespace tss::kernels

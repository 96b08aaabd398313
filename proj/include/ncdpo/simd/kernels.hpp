#pragma once

// Dense double-precision kernels behind the autodiff tape.
//
// Every kernel has a portable scalar reference and, on x86-64 hosts with
// AVX2+FMA, a vectorized variant. The active table is chosen once per process
// from CPUID and can be forced with NCDPO_SIMD=scalar|avx2.
//
// Output elements never depend on the number of rows in a call: gemm_nn
// accumulates each C(i,j) over p = 0..K-1 in order, so a row evaluated inside
// a batch of 1 or 1000 is bit-identical. The AVX2 variant keeps this by using
// fused multiply-add in both the vector body and the scalar tail.

#include <cstddef>
#include <string_view>

namespace ncdpo::simd {

struct KernelTable {
  std::string_view name;

  // C[M,N] (+)= A[M,K] * B[K,N]
  void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const double* a,
                  const double* b, double* c, bool accumulate);
  // C[M,N] (+)= A[K,M]^T * B[K,N]
  void (*gemm_tn)(std::size_t m, std::size_t n, std::size_t k, const double* a,
                  const double* b, double* c, bool accumulate);
  // C[M,N] (+)= A[M,K] * B[N,K]^T
  void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t k, const double* a,
                  const double* b, double* c, bool accumulate);

  // y += alpha * x
  void (*axpy)(std::size_t n, double alpha, const double* x, double* y);
  // y += a * b (elementwise)
  void (*mul_acc)(std::size_t n, const double* a, const double* b, double* y);
  // out = a * b (elementwise)
  void (*mul)(std::size_t n, const double* a, const double* b, double* out);
  // out = a + alpha * b
  void (*add_scaled)(std::size_t n, const double* a, double alpha, const double* b,
                     double* out);
  double (*dot)(std::size_t n, const double* a, const double* b);
};

const KernelTable& scalar_kernels();

// nullptr when the binary was built without AVX2 support or the CPU lacks it.
const KernelTable* avx2_kernels();

// Table selected for this process.
const KernelTable& kernels();

}  // namespace ncdpo::simd

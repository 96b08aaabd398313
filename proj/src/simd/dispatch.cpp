#include <cstdlib>
#include <iostream>
#include <string_view>

#include "ncdpo/simd/kernels.hpp"

namespace ncdpo::simd {

#if defined(NCDPO_HAVE_AVX2)
const KernelTable& avx2_table();
#endif

const KernelTable* avx2_kernels() {
#if defined(NCDPO_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
  static const bool supported =
      __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  return supported ? &avx2_table() : nullptr;
#else
  return nullptr;
#endif
}

namespace {

const KernelTable& select() {
  const char* forced = std::getenv("NCDPO_SIMD");
  const std::string_view choice = forced ? forced : "auto";
  if (choice == "scalar") return scalar_kernels();
  const KernelTable* vec = avx2_kernels();
  if (choice == "avx2" && !vec) {
    std::cerr << "NCDPO_SIMD=avx2 requested but unavailable; using scalar kernels\n";
  }
  return vec ? *vec : scalar_kernels();
}

}  // namespace

const KernelTable& kernels() {
  static const KernelTable& active = select();
  return active;
}

}  // namespace ncdpo::simd

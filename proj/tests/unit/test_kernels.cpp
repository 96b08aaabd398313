#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "ncdpo/rng.hpp"
#include "ncdpo/simd/kernels.hpp"

using namespace ncdpo;

namespace {

std::vector<double> randn(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  rng.fill_normal(v);
  return v;
}

double max_rel(const std::vector<double>& a, const std::vector<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(1.0, std::abs(b[i])));
  }
  return worst;
}

// Naive triple loop, independent of either table.
std::vector<double> ref_gemm(std::size_t m, std::size_t n, std::size_t k, const double* a,
                             bool ta, const double* b, bool tb) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      long double s = 0;
      for (std::size_t p = 0; p < k; ++p) {
        const double x = ta ? a[p * m + i] : a[i * k + p];
        const double y = tb ? b[j * k + p] : b[p * n + j];
        s += static_cast<long double>(x) * y;
      }
      c[i * n + j] = static_cast<double>(s);
    }
  return c;
}

void check_table(const simd::KernelTable& t) {
  Rng rng(7);
  // Odd sizes hit the 16-wide block, the 4-lane loop and the tail.
  const std::size_t dims[][3] = {{1, 1, 1}, {3, 5, 7}, {17, 37, 19}, {8, 64, 33}, {2, 21, 3}};
  for (const auto& d : dims) {
    const std::size_t m = d[0], n = d[1], k = d[2];
    const auto a = randn(m * k, rng);
    const auto b = randn(k * n, rng);
    std::vector<double> c(m * n, 0.0);
    t.gemm_nn(m, n, k, a.data(), b.data(), c.data(), false);
    CHECK(max_rel(c, ref_gemm(m, n, k, a.data(), false, b.data(), false)) < 1e-12);

    const auto at = randn(k * m, rng);
    t.gemm_tn(m, n, k, at.data(), b.data(), c.data(), false);
    CHECK(max_rel(c, ref_gemm(m, n, k, at.data(), true, b.data(), false)) < 1e-12);

    const auto bt = randn(n * k, rng);
    std::vector<double> base = randn(m * n, rng);
    std::vector<double> acc = base;
    t.gemm_nt(m, n, k, a.data(), bt.data(), acc.data(), true);
    auto expect = ref_gemm(m, n, k, a.data(), false, bt.data(), true);
    for (std::size_t i = 0; i < expect.size(); ++i) expect[i] += base[i];
    CHECK(max_rel(acc, expect) < 1e-12);
  }

  for (std::size_t n : {0ul, 1ul, 5ul, 8ul, 13ul, 100ul}) {
    const auto x = randn(n, rng);
    const auto y = randn(n, rng);
    long double d = 0;
    for (std::size_t i = 0; i < n; ++i) d += static_cast<long double>(x[i]) * y[i];
    CHECK(std::abs(t.dot(n, x.data(), y.data()) - static_cast<double>(d)) < 1e-12 * (1 + n));

    std::vector<double> out(n), expect(n);
    t.add_scaled(n, x.data(), -0.5, y.data(), out.data());
    for (std::size_t i = 0; i < n; ++i) expect[i] = x[i] - 0.5 * y[i];
    CHECK(max_rel(out, expect) < 1e-15);

    t.mul(n, x.data(), y.data(), out.data());
    for (std::size_t i = 0; i < n; ++i) CHECK(out[i] == x[i] * y[i]);

    std::vector<double> z = y;
    t.axpy(n, 2.0, x.data(), z.data());
    for (std::size_t i = 0; i < n; ++i) expect[i] = y[i] + 2.0 * x[i];
    CHECK(max_rel(z, expect) < 1e-15);

    z = y;
    t.mul_acc(n, x.data(), x.data(), z.data());
    for (std::size_t i = 0; i < n; ++i) expect[i] = y[i] + x[i] * x[i];
    CHECK(max_rel(z, expect) < 1e-15);
  }
}

}  // namespace

TEST_CASE("scalar kernels match the naive reference") { check_table(simd::scalar_kernels()); }

TEST_CASE("avx2 kernels match the naive reference") {
  const simd::KernelTable* avx = simd::avx2_kernels();
  if (!avx) {
    MESSAGE("avx2 unavailable on this host; skipped");
    return;
  }
  check_table(*avx);
}

TEST_CASE("avx2 and scalar tables agree") {
  const simd::KernelTable* avx = simd::avx2_kernels();
  if (!avx) return;
  const auto& sc = simd::scalar_kernels();
  Rng rng(11);
  const std::size_t m = 9, n = 70, k = 45;
  const auto a = randn(m * k, rng);
  const auto b = randn(k * n, rng);
  std::vector<double> c1(m * n), c2(m * n);
  sc.gemm_nn(m, n, k, a.data(), b.data(), c1.data(), false);
  avx->gemm_nn(m, n, k, a.data(), b.data(), c2.data(), false);
  CHECK(max_rel(c1, c2) < 1e-12);
}

TEST_CASE("gemm rows do not depend on batch size") {
  for (const simd::KernelTable* t : {&simd::scalar_kernels(), simd::avx2_kernels()}) {
    if (!t) continue;
    Rng rng(3);
    const std::size_t m = 33, n = 41, k = 29;
    const auto a = randn(m * k, rng);
    const auto b = randn(k * n, rng);
    std::vector<double> full(m * n), one(n);
    t->gemm_nn(m, n, k, a.data(), b.data(), full.data(), false);
    for (std::size_t i = 0; i < m; ++i) {
      t->gemm_nn(1, n, k, a.data() + i * k, b.data(), one.data(), false);
      for (std::size_t j = 0; j < n; ++j) REQUIRE(one[j] == full[i * n + j]);
    }
  }
}

TEST_CASE("active table is one of the two") {
  const auto name = simd::kernels().name;
  CHECK((name == "scalar" || name == "avx2"));
}

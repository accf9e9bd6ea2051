#include "affmtl/kernels.hpp"

#include <cstdint>

namespace affmtl::kernels {

namespace {

inline void matmul_row(const double* a, const double* b, double* c, std::size_t i, std::size_t k,
                       std::size_t n) {
  const double* arow = a + i * k;
  double* crow = c + i * n;
  for (std::size_t p = 0; p < k; ++p) {
    const double av = arow[p];
    const double* brow = b + p * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
  }
}

inline void matmul_at_b_row(const double* a, const double* b, double* c, std::size_t i,
                            std::size_t m, std::size_t k, std::size_t n) {
  double* crow = c + i * n;
  for (std::size_t r = 0; r < m; ++r) {
    const double av = a[r * k + i];
    const double* brow = b + r * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
  }
}

inline void matmul_a_bt_row(const double* a, const double* b, double* c, std::size_t i,
                            std::size_t n, std::size_t k) {
  const double* arow = a + i * n;
  double* crow = c + i * k;
  for (std::size_t j = 0; j < k; ++j) {
    const double* brow = b + j * n;
    double acc = 0.0;
    for (std::size_t p = 0; p < n; ++p) acc += arow[p] * brow[p];
    crow[j] += acc;
  }
}

}  // namespace

namespace serial {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) matmul_row(a.data(), b.data(), c.data(), i, k, n);
}

void matmul_at_b(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < k; ++i) matmul_at_b_row(a.data(), b.data(), c.data(), i, m, k, n);
}

void matmul_a_bt(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) matmul_a_bt_row(a.data(), b.data(), c.data(), i, n, k);
}

}  // namespace serial

namespace parallel {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n) {
  const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < rows; ++i)
    matmul_row(a.data(), b.data(), c.data(), static_cast<std::size_t>(i), k, n);
}

void matmul_at_b(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t k, std::size_t n) {
  const auto rows = static_cast<std::int64_t>(k);
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < rows; ++i)
    matmul_at_b_row(a.data(), b.data(), c.data(), static_cast<std::size_t>(i), m, k, n);
}

void matmul_a_bt(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t n, std::size_t k) {
  const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < rows; ++i)
    matmul_a_bt_row(a.data(), b.data(), c.data(), static_cast<std::size_t>(i), n, k);
}

}  // namespace parallel

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n) {
  if (m * k * n >= kParallelThreshold)
    parallel::matmul(a, b, c, m, k, n);
  else
    serial::matmul(a, b, c, m, k, n);
}

void matmul_at_b(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t k, std::size_t n) {
  if (m * k * n >= kParallelThreshold)
    parallel::matmul_at_b(a, b, c, m, k, n);
  else
    serial::matmul_at_b(a, b, c, m, k, n);
}

void matmul_a_bt(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t n, std::size_t k) {
  if (m * k * n >= kParallelThreshold)
    parallel::matmul_a_bt(a, b, c, m, n, k);
  else
    serial::matmul_a_bt(a, b, c, m, n, k);
}

}  // namespace affmtl::kernels

#pragma once

#include <cstddef>
#include <span>

// Dense row-major matrix kernels used by the autodiff engine.
//
// Every kernel accumulates into its output (C += ...). The serial namespace is
// the reference; the parallel namespace splits work over output rows with
// OpenMP. Each output element is reduced in the same order by both variants,
// so the results are bitwise identical regardless of thread count.
namespace affmtl::kernels {

namespace serial {
// C[m,n] += A[m,k] * B[k,n]
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n);
// C[k,n] += A[m,k]^T * B[m,n]
void matmul_at_b(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t k, std::size_t n);
// C[m,k] += A[m,n] * B[k,n]^T
void matmul_a_bt(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t n, std::size_t k);
}  // namespace serial

namespace parallel {
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n);
void matmul_at_b(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t k, std::size_t n);
void matmul_a_bt(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t n, std::size_t k);
}  // namespace parallel

// Work size (multiply-adds) above which the dispatchers use the parallel path.
inline constexpr std::size_t kParallelThreshold = 1 << 16;

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n);
void matmul_at_b(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t k, std::size_t n);
void matmul_a_bt(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t n, std::size_t k);

}  // namespace affmtl::kernels

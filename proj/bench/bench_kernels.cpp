#include <benchmark/benchmark.h>

#include <span>
#include <vector>

#include "affmtl/kernels.hpp"
#include "affmtl/rng.hpp"

namespace {

std::vector<double> random_matrix(std::size_t n, std::uint64_t seed) {
  affmtl::Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

using KernelFn = void (*)(std::span<const double>, std::span<const double>, std::span<double>,
                         std::size_t, std::size_t, std::size_t);

template <KernelFn Kernel>
void run_matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_matrix(n * n, 1);
  const auto b = random_matrix(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    std::fill(c.begin(), c.end(), 0.0);
    Kernel(a, b, c, n, n, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

}  // namespace

BENCHMARK(run_matmul<affmtl::kernels::serial::matmul>)->Arg(64)->Arg(256)->Arg(512);
BENCHMARK(run_matmul<affmtl::kernels::parallel::matmul>)->Arg(64)->Arg(256)->Arg(512);
BENCHMARK(run_matmul<affmtl::kernels::serial::matmul_at_b>)->Arg(256);
BENCHMARK(run_matmul<affmtl::kernels::parallel::matmul_at_b>)->Arg(256);
BENCHMARK(run_matmul<affmtl::kernels::serial::matmul_a_bt>)->Arg(256);
BENCHMARK(run_matmul<affmtl::kernels::parallel::matmul_a_bt>)->Arg(256);

BENCHMARK_MAIN();

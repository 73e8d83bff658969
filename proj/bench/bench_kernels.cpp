// Serial reference kernels against the OpenMP ones, at the shapes the
// desk-scale model actually produces.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "updetr/kernels.hpp"

namespace k = updetr::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

template <bool Reference>
void gemm_bench(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto n = static_cast<std::size_t>(state.range(1));
  const auto kk = static_cast<std::size_t>(state.range(2));
  const bool trans_b = state.range(3) != 0;
  const auto a = random_vec(m * kk, 1), b = random_vec(kk * n, 2);
  std::vector<double> c(m * n);
  for (auto _ : state) {
    if constexpr (Reference)
      k::reference::gemm(false, trans_b, m, n, kk, a, b, c);
    else
      k::gemm(false, trans_b, m, n, kk, a, b, c);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * m * n * kk));
}

// tokens × d against d × d (linear), tokens × ffn, and a conv im2col product
void gemm_shapes(benchmark::internal::Benchmark* b) {
  b->Args({80, 64, 64, 1})->Args({80, 128, 64, 1})->Args({64, 64, 80, 0})->Args({64, 80, 288, 0})
      ->Args({256, 256, 256, 0});
}

template <bool Reference>
void im2col_bench(benchmark::State& state) {
  const auto ch = static_cast<std::size_t>(state.range(0));
  const auto side = static_cast<std::size_t>(state.range(1));
  const auto x = random_vec(ch * side * side, 3);
  const std::size_t o = k::conv_out_extent(side, 3, 2, 1);
  std::vector<double> cols(ch * 9 * o * o);
  for (auto _ : state) {
    if constexpr (Reference)
      k::reference::im2col(x, ch, side, side, 3, 2, 1, cols);
    else
      k::im2col(x, ch, side, side, 3, 2, 1, cols);
    benchmark::DoNotOptimize(cols.data());
  }
}

}  // namespace

BENCHMARK(gemm_bench<true>)->Name("gemm/reference")->Apply(gemm_shapes);
BENCHMARK(gemm_bench<false>)->Name("gemm/openmp")->Apply(gemm_shapes);
BENCHMARK(im2col_bench<true>)->Name("im2col/reference")->Args({3, 64})->Args({16, 32})->Args({32, 16});
BENCHMARK(im2col_bench<false>)->Name("im2col/openmp")->Args({3, 64})->Args({16, 32})->Args({32, 16});

BENCHMARK_MAIN();

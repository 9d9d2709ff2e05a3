// Serial reference kernels against their OpenMP counterparts.
#include <benchmark/benchmark.h>

#include <vector>

#include "mole/kernels.hpp"
#include "mole/rng.hpp"

namespace k = mole::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  mole::Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

template <auto Gemm>
void BM_gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_vec(n * n, 1), b = random_vec(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    Gemm(n, n, n, a, b, c, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(n * n * n));
}

template <auto Softmax>
void BM_softmax(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const std::size_t cols = 64;
  const auto x = random_vec(rows * cols, 3);
  std::vector<double> y(rows * cols);
  for (auto _ : state) {
    Softmax(rows, cols, x, y);
    benchmark::DoNotOptimize(y.data());
  }
}

template <auto LayerNorm>
void BM_layer_norm(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const std::size_t cols = 64;
  const auto x = random_vec(rows * cols, 4);
  const std::vector<double> gamma(cols, 1.0), beta(cols, 0.0);
  std::vector<double> y(rows * cols), mean(rows), rstd(rows);
  for (auto _ : state) {
    LayerNorm(rows, cols, x, gamma, beta, 1e-5, y, mean, rstd);
    benchmark::DoNotOptimize(y.data());
  }
}

}  // namespace

BENCHMARK(BM_gemm<k::serial::gemm_nn>)->Name("gemm_nn/serial")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_gemm<k::parallel::gemm_nn>)->Name("gemm_nn/omp")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_softmax<k::serial::softmax_rows>)->Name("softmax/serial")->Arg(1024)->Arg(16384);
BENCHMARK(BM_softmax<k::parallel::softmax_rows>)->Name("softmax/omp")->Arg(1024)->Arg(16384);
BENCHMARK(BM_layer_norm<k::serial::layer_norm_rows>)->Name("layer_norm/serial")->Arg(1024)->Arg(16384);
BENCHMARK(BM_layer_norm<k::parallel::layer_norm_rows>)->Name("layer_norm/omp")->Arg(1024)->Arg(16384);

BENCHMARK_MAIN();

// Serial reference vs OpenMP kernels at the shapes a d=64 student sees
// (batch 32, sequence 14) and a few larger ones.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "vibprune/kernels.hpp"

using vibprune::real;
namespace serial = vibprune::kernels::serial;
namespace parallel = vibprune::kernels::parallel;

namespace {

std::vector<real> random_vector(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<real> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

template <auto Gemm>
void BM_Gemm(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto k = static_cast<std::size_t>(state.range(1));
  const auto n = static_cast<std::size_t>(state.range(2));
  const auto a = random_vector(m * k, 1), b = random_vector(k * n, 2);
  std::vector<real> c(m * n);
  for (auto _ : state) {
    Gemm(a.data(), b.data(), c.data(), m, k, n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * 2 * m * k * n));
}

template <auto Softmax>
void BM_Softmax(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const auto cols = static_cast<std::size_t>(state.range(1));
  const auto x = random_vector(rows * cols, 3);
  std::vector<real> y(rows * cols);
  for (auto _ : state) {
    Softmax(x.data(), y.data(), rows, cols);
    benchmark::DoNotOptimize(y.data());
  }
}

template <auto Norm>
void BM_LayerNorm(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const auto cols = static_cast<std::size_t>(state.range(1));
  const auto x = random_vector(rows * cols, 4);
  const std::vector<real> gamma(cols, real(1)), beta(cols, real(0));
  std::vector<real> y(rows * cols), xhat(rows * cols), rstd(rows);
  for (auto _ : state) {
    Norm(x.data(), gamma.data(), beta.data(), y.data(), xhat.data(), rstd.data(), rows, cols, cols, 1e-5);
    benchmark::DoNotOptimize(y.data());
  }
}

template <auto Gelu>
void BM_Gelu(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto x = random_vector(n, 5);
  std::vector<real> y(n);
  for (auto _ : state) {
    Gelu(x.data(), y.data(), n);
    benchmark::DoNotOptimize(y.data());
  }
}

void gemm_shapes(benchmark::internal::Benchmark* b) {
  b->Args({448, 64, 64})->Args({448, 64, 128})->Args({448, 128, 64})->Args({1024, 256, 256});
}

}  // namespace

BENCHMARK(BM_Gemm<serial::gemm_nn>)->Apply(gemm_shapes);
BENCHMARK(BM_Gemm<parallel::gemm_nn>)->Apply(gemm_shapes);
BENCHMARK(BM_Gemm<serial::gemm_nt>)->Apply(gemm_shapes);
BENCHMARK(BM_Gemm<parallel::gemm_nt>)->Apply(gemm_shapes);
BENCHMARK(BM_Gemm<serial::gemm_tn>)->Apply(gemm_shapes);
BENCHMARK(BM_Gemm<parallel::gemm_tn>)->Apply(gemm_shapes);
BENCHMARK(BM_Softmax<serial::softmax_rows>)->Args({32 * 4 * 14, 14})->Args({4096, 256});
BENCHMARK(BM_Softmax<parallel::softmax_rows>)->Args({32 * 4 * 14, 14})->Args({4096, 256});
BENCHMARK(BM_LayerNorm<serial::layer_norm_rows>)->Args({448, 64})->Args({4096, 256});
BENCHMARK(BM_LayerNorm<parallel::layer_norm_rows>)->Args({448, 64})->Args({4096, 256});
BENCHMARK(BM_Gelu<serial::gelu>)->Arg(448 * 128)->Arg(1 << 20);
BENCHMARK(BM_Gelu<parallel::gelu>)->Arg(448 * 128)->Arg(1 << 20);

BENCHMARK_MAIN();

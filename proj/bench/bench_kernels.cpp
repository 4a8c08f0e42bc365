// Parallel kernels against their serial reference loops.
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "layerforge/kernels.hpp"

namespace kernels = layerforge::kernels;

namespace {

std::vector<float> random_buffer(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> v(n);
  for (float& x : v) x = u(rng);
  return v;
}

void BM_Gemm(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  auto a = random_buffer(static_cast<std::size_t>(n) * n, 1);
  auto b = random_buffer(static_cast<std::size_t>(n) * n, 2);
  std::vector<float> c(static_cast<std::size_t>(n) * n);
  for (auto _ : state) {
    kernels::gemm<float>(kernels::Trans::No, kernels::Trans::No, n, n, n, 1.0f, a.data(), n, b.data(), n, 0.0f,
                         c.data(), n);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOPS"] = benchmark::Counter(2.0 * n * n * n, benchmark::Counter::kIsIterationInvariantRate,
                                                benchmark::Counter::kIs1000);
}

void BM_GemmReference(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  auto a = random_buffer(static_cast<std::size_t>(n) * n, 1);
  auto b = random_buffer(static_cast<std::size_t>(n) * n, 2);
  std::vector<float> c(static_cast<std::size_t>(n) * n);
  for (auto _ : state) {
    kernels::reference::gemm<float>(kernels::Trans::No, kernels::Trans::No, n, n, n, 1.0f, a.data(), n, b.data(), n,
                                    0.0f, c.data(), n);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOPS"] = benchmark::Counter(2.0 * n * n * n, benchmark::Counter::kIsIterationInvariantRate,
                                                benchmark::Counter::kIs1000);
}

kernels::ConvGeometry conv_geometry(int channels, int size) {
  kernels::ConvGeometry g;
  g.batch = 4;
  g.in_channels = channels;
  g.out_channels = channels;
  g.height = size;
  g.width = size;
  return g;
}

void BM_Conv3x3(benchmark::State& state) {
  const auto g = conv_geometry(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)));
  auto x = random_buffer(static_cast<std::size_t>(g.batch) * g.in_channels * g.height * g.width, 3);
  auto w = random_buffer(static_cast<std::size_t>(g.out_channels) * g.patch(), 4);
  std::vector<float> y(static_cast<std::size_t>(g.batch) * g.out_channels * g.out_height() * g.out_width());
  for (auto _ : state) {
    kernels::conv2d_forward(g, x.data(), w.data(), nullptr, y.data());
    benchmark::DoNotOptimize(y.data());
  }
  state.counters["GFLOPS"] = benchmark::Counter(
      2.0 * g.batch * g.out_channels * g.patch() * g.out_height() * g.out_width(),
      benchmark::Counter::kIsIterationInvariantRate, benchmark::Counter::kIs1000);
}

void BM_Conv3x3Reference(benchmark::State& state) {
  const auto g = conv_geometry(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)));
  auto x = random_buffer(static_cast<std::size_t>(g.batch) * g.in_channels * g.height * g.width, 3);
  auto w = random_buffer(static_cast<std::size_t>(g.out_channels) * g.patch(), 4);
  std::vector<float> y(static_cast<std::size_t>(g.batch) * g.out_channels * g.out_height() * g.out_width());
  for (auto _ : state) {
    kernels::reference::conv2d_forward(g, x.data(), w.data(), nullptr, y.data());
    benchmark::DoNotOptimize(y.data());
  }
  state.counters["GFLOPS"] = benchmark::Counter(
      2.0 * g.batch * g.out_channels * g.patch() * g.out_height() * g.out_width(),
      benchmark::Counter::kIsIterationInvariantRate, benchmark::Counter::kIs1000);
}

void BM_SoftmaxRows(benchmark::State& state) {
  const int cols = static_cast<int>(state.range(0));
  auto base = random_buffer(static_cast<std::size_t>(256) * cols, 5);
  for (auto _ : state) {
    auto v = base;
    kernels::softmax_rows(v.data(), 256, cols);
    benchmark::DoNotOptimize(v.data());
  }
}

void BM_SoftmaxRowsReference(benchmark::State& state) {
  const int cols = static_cast<int>(state.range(0));
  auto base = random_buffer(static_cast<std::size_t>(256) * cols, 5);
  for (auto _ : state) {
    auto v = base;
    kernels::reference::softmax_rows(v.data(), 256, cols);
    benchmark::DoNotOptimize(v.data());
  }
}

}  // namespace

BENCHMARK(BM_Gemm)->Arg(64)->Arg(256)->Arg(512);
BENCHMARK(BM_GemmReference)->Arg(64)->Arg(256);
BENCHMARK(BM_Conv3x3)->Args({16, 32})->Args({32, 16});
BENCHMARK(BM_Conv3x3Reference)->Args({16, 32})->Args({32, 16});
BENCHMARK(BM_SoftmaxRows)->Arg(272)->Arg(512);
BENCHMARK(BM_SoftmaxRowsReference)->Arg(272)->Arg(512);

BENCHMARK_MAIN();

// SPDX-License-Identifier: Apache-2.0
//
// Serial reference vs OpenMP kernels. Run with OMP_NUM_THREADS set to taste.
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "openus/kernels.hpp"

namespace k = openus::kernels;

namespace {

std::vector<float> random_vec(std::size_t n, std::uint64_t seed, float lo = -1, float hi = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> d(lo, hi);
  std::vector<float> v(n);
  for (float& x : v) x = d(rng);
  return v;
}

struct ScanProblem {
  std::vector<float> u, delta, a, b, c;
  k::ScanInputs<float> in;

  ScanProblem(std::size_t t, std::size_t d, std::size_t n)
      : u(random_vec(t * d, 1)),
        delta(random_vec(t, 2, 0.01f, 0.1f)),
        a(random_vec(n, 3, -2.0f, -0.1f)),
        b(random_vec(t * n, 4)),
        c(random_vec(t * n, 5)) {
    in = {{t, d, n}, u, delta, a, b, c};
  }
};

template <bool Parallel>
void BM_gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_vec(n * n, 1), b = random_vec(n * n, 2);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel)
      k::omp::gemm<float>(a, b, c, n, n, n, false, false, false);
    else
      k::serial::gemm<float>(a, b, c, n, n, n, false, false, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(2 * n * n * n));
}

template <bool Parallel>
void BM_scan_forward(benchmark::State& state) {
  const auto t = static_cast<std::size_t>(state.range(0));
  ScanProblem p(t, 64, 16);
  std::vector<float> y(t * 64), states(t * 16 * 64);
  for (auto _ : state) {
    if constexpr (Parallel)
      k::omp::scan_forward<float>(p.in, y, states);
    else
      k::serial::scan_forward<float>(p.in, y, states);
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void BM_scan_backward(benchmark::State& state) {
  const auto t = static_cast<std::size_t>(state.range(0));
  ScanProblem p(t, 64, 16);
  std::vector<float> y(t * 64), states(t * 16 * 64);
  k::serial::scan_forward<float>(p.in, y, states);
  const auto gy = random_vec(t * 64, 9);
  std::vector<float> gu(t * 64), gd(t), ga(16), gb(t * 16), gc(t * 16);
  for (auto _ : state) {
    std::fill(gu.begin(), gu.end(), 0.f);
    std::fill(gd.begin(), gd.end(), 0.f);
    std::fill(ga.begin(), ga.end(), 0.f);
    std::fill(gb.begin(), gb.end(), 0.f);
    std::fill(gc.begin(), gc.end(), 0.f);
    const k::ScanGrads<float> g{gu, gd, ga, gb, gc};
    if constexpr (Parallel)
      k::omp::scan_backward<float>(p.in, states, gy, g);
    else
      k::serial::scan_backward<float>(p.in, states, gy, g);
    benchmark::DoNotOptimize(gu.data());
  }
}

template <bool Parallel>
void BM_attention(benchmark::State& state) {
  const auto t = static_cast<std::size_t>(state.range(0));
  ScanProblem p(t, 64, 16);
  std::vector<float> att(t * t);
  for (auto _ : state) {
    if constexpr (Parallel)
      k::omp::ssm_attention<float>(p.in, k::AttentionForm::weighted, att);
    else
      k::serial::ssm_attention<float>(p.in, k::AttentionForm::weighted, att);
    benchmark::DoNotOptimize(att.data());
  }
}

}  // namespace

BENCHMARK(BM_gemm<false>)->Name("gemm/serial")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_gemm<true>)->Name("gemm/omp")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_scan_forward<false>)->Name("scan_forward/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_scan_forward<true>)->Name("scan_forward/omp")->Arg(64)->Arg(256);
BENCHMARK(BM_scan_backward<false>)->Name("scan_backward/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_scan_backward<true>)->Name("scan_backward/omp")->Arg(64)->Arg(256);
BENCHMARK(BM_attention<false>)->Name("ssm_attention/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_attention<true>)->Name("ssm_attention/omp")->Arg(64)->Arg(256);

BENCHMARK_MAIN();

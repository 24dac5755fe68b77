// Parallel kernels vs the serial reference, at the shapes the toy model and
// the SAE actually hit.
#include <benchmark/benchmark.h>

#include <vector>

#include "featlab/kernels.hpp"
#include "featlab/rng.hpp"

namespace {

std::vector<float> random_vec(std::size_t n, std::uint64_t seed)
{
    featlab::Rng rng(seed);
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    return v;
}

template <bool Reference>
void BM_gemm_nt(benchmark::State& state)
{
    const int m = state.range(0), n = state.range(1), k = state.range(2);
    auto a = random_vec(std::size_t(m) * k, 1);
    auto b = random_vec(std::size_t(n) * k, 2);
    std::vector<float> c(std::size_t(m) * n);
    for (auto _ : state) {
        if constexpr (Reference)
            featlab::kernels::reference::gemm_nt(a, b, c, m, n, k);
        else
            featlab::kernels::gemm_nt(a, b, c, m, n, k);
        benchmark::DoNotOptimize(c.data());
    }
    state.counters["GFLOPS"] = benchmark::Counter(2.0 * m * n * k, benchmark::Counter::kIsIterationInvariantRate,
                                                  benchmark::Counter::kIs1000);
}

template <bool Reference>
void BM_gemm_nn(benchmark::State& state)
{
    const int m = state.range(0), n = state.range(1), k = state.range(2);
    auto a = random_vec(std::size_t(m) * k, 1);
    auto b = random_vec(std::size_t(k) * n, 2);
    std::vector<float> c(std::size_t(m) * n);
    for (auto _ : state) {
        if constexpr (Reference)
            featlab::kernels::reference::gemm_nn(a, b, c, m, n, k);
        else
            featlab::kernels::gemm_nn(a, b, c, m, n, k);
        benchmark::DoNotOptimize(c.data());
    }
    state.counters["GFLOPS"] = benchmark::Counter(2.0 * m * n * k, benchmark::Counter::kIsIterationInvariantRate,
                                                  benchmark::Counter::kIs1000);
}

template <bool Reference>
void BM_gemm_tn(benchmark::State& state)
{
    const int m = state.range(0), n = state.range(1), k = state.range(2);
    auto a = random_vec(std::size_t(k) * m, 1);
    auto b = random_vec(std::size_t(k) * n, 2);
    std::vector<float> c(std::size_t(m) * n);
    for (auto _ : state) {
        if constexpr (Reference)
            featlab::kernels::reference::gemm_tn(a, b, c, m, n, k);
        else
            featlab::kernels::gemm_tn(a, b, c, m, n, k);
        benchmark::DoNotOptimize(c.data());
    }
    state.counters["GFLOPS"] = benchmark::Counter(2.0 * m * n * k, benchmark::Counter::kIsIterationInvariantRate,
                                                  benchmark::Counter::kIs1000);
}

// (tokens, out, in): attention projections, MLP up/down, SAE encoder.
#define SHAPES Args({224, 64, 64})->Args({224, 256, 64})->Args({224, 64, 256})->Args({256, 1024, 256})

BENCHMARK(BM_gemm_nt<false>)->SHAPES;
BENCHMARK(BM_gemm_nt<true>)->SHAPES;
BENCHMARK(BM_gemm_nn<false>)->SHAPES;
BENCHMARK(BM_gemm_nn<true>)->SHAPES;
BENCHMARK(BM_gemm_tn<false>)->SHAPES;
BENCHMARK(BM_gemm_tn<true>)->SHAPES;

} // namespace

BENCHMARK_MAIN();

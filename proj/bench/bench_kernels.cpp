// Serial reference kernels against their OpenMP counterparts.

#include <benchmark/benchmark.h>

#include <vector>

#include "tcl/kernels.hpp"
#include "tcl/rng.hpp"

namespace {

using namespace tcl;

std::vector<double> random_buffer(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

template <auto Gemm>
void BM_gemm_nn(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_buffer(n * n, 1), b = random_buffer(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    Gemm(a.data(), b.data(), c.data(), n, n, n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}

template <auto Forward>
void BM_attention(benchmark::State& state) {
  kernels::AttentionShape s{32, 65, 65, 64, 4};
  s.batch = static_cast<std::size_t>(state.range(0));
  const auto q = random_buffer(s.batch * s.q_len * s.dim, 3);
  const auto k = random_buffer(s.batch * s.k_len * s.dim, 4);
  const auto v = random_buffer(s.batch * s.k_len * s.dim, 5);
  std::vector<double> out(q.size()), probs(s.batch * s.heads * s.q_len * s.k_len);
  for (auto _ : state) {
    Forward(q.data(), k.data(), v.data(), out.data(), probs.data(), {}, s);
    benchmark::DoNotOptimize(out.data());
  }
}

}  // namespace

BENCHMARK(BM_gemm_nn<tcl::kernels::serial::gemm_nn>)->Name("gemm_nn/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_gemm_nn<tcl::kernels::parallel::gemm_nn>)->Name("gemm_nn/parallel")->Arg(64)->Arg(256);
BENCHMARK(BM_attention<tcl::kernels::serial::attention_forward>)->Name("attention/serial")->Arg(8)->Arg(32);
BENCHMARK(BM_attention<tcl::kernels::parallel::attention_forward>)->Name("attention/parallel")->Arg(8)->Arg(32);

BENCHMARK_MAIN();

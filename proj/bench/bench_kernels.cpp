// SPDX-License-Identifier: Apache-2.0
// Serial reference kernels against their OpenMP counterparts.
#include <vector>

#include <benchmark/benchmark.h>

#include "finsent/kernels.hpp"
#include "finsent/prng.hpp"

namespace {

namespace k = finsent::kernels;

std::vector<float> random_values(std::size_t n, std::uint64_t seed) {
  finsent::SplitMix64 rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

template <bool Parallel>
void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_values(n * n, 1);
  const auto b = random_values(n * n, 2);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::matmul<float>(a, b, {}, c, n, n, n);
    } else {
      k::serial::matmul<float>(a, b, {}, c, n, n, n);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

template <bool Parallel>
void BM_Attention(benchmark::State& state) {
  const auto t = static_cast<std::size_t>(state.range(0));
  const std::size_t d = 128;
  const std::size_t heads = 4;
  const auto q = random_values(t * d, 3);
  const auto kk = random_values(t * d, 4);
  const auto v = random_values(t * d, 5);
  std::vector<std::uint8_t> mask(t * t, 0);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = 0; j <= i; ++j) mask[i * t + j] = 1;
  }
  std::vector<float> probs(heads * t * t), out(t * d);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::attention_forward<float>(q, kk, v, mask, probs, out, t, d, heads);
    } else {
      k::serial::attention_forward<float>(q, kk, v, mask, probs, out, t, d, heads);
    }
    benchmark::DoNotOptimize(out.data());
  }
}

}  // namespace

BENCHMARK(BM_Matmul<false>)->Name("matmul/serial")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_Matmul<true>)->Name("matmul/openmp")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_Attention<false>)->Name("attention/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_Attention<true>)->Name("attention/openmp")->Arg(64)->Arg(256);

BENCHMARK_MAIN();

// Serial reference kernels against their OpenMP counterparts at training sizes.

#include <benchmark/benchmark.h>

#include <vector>

#include "medicat/kernels.hpp"
#include "medicat/random.hpp"

namespace k = medicat::kernels;

namespace {

std::vector<double> noise(std::size_t n, std::uint64_t seed) {
  medicat::Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

template <bool Parallel>
void BM_gemm(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0)), n = static_cast<std::size_t>(state.range(1)),
             kk = static_cast<std::size_t>(state.range(2));
  const auto a = noise(m * kk, 1), b = noise(kk * n, 2);
  std::vector<double> c(m * n);
  for (auto _ : state) {
    if constexpr (Parallel)
      k::parallel::gemm(m, n, kk, a.data(), b.data(), c.data(), false);
    else
      k::serial::gemm(m, n, kk, a.data(), b.data(), c.data(), false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * m * n * kk));
}

template <bool Parallel>
void BM_attention(benchmark::State& state) {
  k::AttentionShape s{static_cast<std::size_t>(state.range(0)), 17, 4, 16};
  const auto qkv = noise(s.batch * s.tokens * 3 * s.model_dim(), 3);
  std::vector<double> out(s.batch * s.tokens * s.model_dim()), probs(s.prob_count());
  for (auto _ : state) {
    if constexpr (Parallel)
      k::parallel::attention_forward(s, qkv.data(), out.data(), probs.data());
    else
      k::serial::attention_forward(s, qkv.data(), out.data(), probs.data());
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Parallel>
void BM_layer_norm(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0)), cols = std::size_t{64};
  const auto x = noise(rows * cols, 4), gamma = noise(cols, 5), beta = noise(cols, 6);
  std::vector<double> y(rows * cols), xhat(rows * cols), rstd(rows);
  for (auto _ : state) {
    if constexpr (Parallel)
      k::parallel::layer_norm_forward(rows, cols, x.data(), gamma.data(), beta.data(), 1e-5, y.data(), xhat.data(),
                                      rstd.data());
    else
      k::serial::layer_norm_forward(rows, cols, x.data(), gamma.data(), beta.data(), 1e-5, y.data(), xhat.data(),
                                    rstd.data());
    benchmark::DoNotOptimize(y.data());
  }
}

}  // namespace

// 48 images x 17 tokens = 816 rows; qkv, MLP and head projections.
BENCHMARK(BM_gemm<false>)->Args({816, 192, 64})->Args({816, 256, 64})->Args({816, 64, 256})->Args({256, 256, 256});
BENCHMARK(BM_gemm<true>)->Args({816, 192, 64})->Args({816, 256, 64})->Args({816, 64, 256})->Args({256, 256, 256});
BENCHMARK(BM_attention<false>)->Arg(48);
BENCHMARK(BM_attention<true>)->Arg(48);
BENCHMARK(BM_layer_norm<false>)->Arg(816);
BENCHMARK(BM_layer_norm<true>)->Arg(816);

BENCHMARK_MAIN();

// Serial vs OpenMP drivers for the hot kernels, plus one encoder forward pass.
// Run with OMP_NUM_THREADS set to compare thread counts.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "hat/kernels.hpp"
#include "hat/model.hpp"

namespace k = hat::kernels;

namespace {

std::vector<float> random_vec(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

k::Backend backend_of(const benchmark::State& state) {
  return state.range(0) == 0 ? k::Backend::kSerial : k::Backend::kParallel;
}

void label(benchmark::State& state) { state.SetLabel(state.range(0) == 0 ? "serial" : "omp"); }

void BM_Gemm(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(1));
  const k::GemmShape s{n, n, n};
  const auto a = random_vec(n * n, 1), b = random_vec(n * n, 2);
  std::vector<float> c(n * n);
  k::ScopedBackend scoped(backend_of(state));
  for (auto _ : state) {
    k::gemm<float>(s, a, b, c);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
  label(state);
}
BENCHMARK(BM_Gemm)->ArgsProduct({{0, 1}, {128, 512}});

void BM_Attention(benchmark::State& state) {
  k::AttentionShape s;
  s.batch = 4;
  s.time = static_cast<std::size_t>(state.range(1));
  s.dim = 256;
  s.heads = 4;
  const std::size_t n = s.batch * s.time * s.dim;
  const auto q = random_vec(n, 1), kk = random_vec(n, 2), v = random_vec(n, 3);
  const std::vector<float> mask(s.time * s.time, 0.0f);
  std::vector<float> out(n), probs(s.probs_size());
  k::ScopedBackend scoped(backend_of(state));
  for (auto _ : state) {
    k::attention_forward<float>(s, q, kk, v, mask, out, probs);
    benchmark::DoNotOptimize(out.data());
  }
  label(state);
}
BENCHMARK(BM_Attention)->ArgsProduct({{0, 1}, {100, 400}});

void BM_LayerNorm(benchmark::State& state) {
  const k::RowShape s{static_cast<std::size_t>(state.range(1)), 512};
  const auto x = random_vec(s.rows * s.cols, 1);
  const std::vector<float> gain(s.cols, 1.0f), bias(s.cols, 0.0f);
  std::vector<float> y(x.size()), mean(s.rows), rstd(s.rows);
  k::ScopedBackend scoped(backend_of(state));
  for (auto _ : state) {
    k::layer_norm_forward<float>(s, x, gain, bias, 1e-5f, y, mean, rstd);
    benchmark::DoNotOptimize(y.data());
  }
  label(state);
}
BENCHMARK(BM_LayerNorm)->ArgsProduct({{0, 1}, {1000, 8000}});

void BM_EncoderForward(benchmark::State& state) {
  hat::ModelConfig c;
  c.num_layers = 4;
  c.model_dim = 128;
  c.num_heads = 4;
  c.ffn_dim = 512;
  c.output_dim = 64;
  const auto params = hat::ModelParams<float>::init(c, 1);
  const auto x = hat::Tensor<float>(hat::Shape{300, c.feature_dim}, random_vec(300 * c.feature_dim, 4));
  k::ScopedBackend scoped(backend_of(state));
  for (auto _ : state) {
    auto y = hat::encoder_forward(hat::Var<float>::constant(x), params, c);
    benchmark::DoNotOptimize(y.value().raw());
  }
  label(state);
}
BENCHMARK(BM_EncoderForward)->ArgsProduct({{0, 1}, {300}})->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();

// SPDX-License-Identifier: Apache-2.0
#include <canopy/deploy.hpp>
#include <canopy/gedi.hpp>
#include <canopy/ops.hpp>
#include <canopy/softlabel.hpp>
#include <canopy/weighting.hpp>

#include <benchmark/benchmark.h>

#include <random>

using namespace canopy;

namespace {

Tensor random(Shape s, std::uint64_t seed)
{
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  Tensor t(std::move(s));
  for (auto& v : t.values())
    v = u(rng);
  return t;
}

void BM_Conv3x3(benchmark::State& state)
{
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto n = static_cast<std::size_t>(state.range(1));
  const Tensor x = random({c, n, n}, 1), k = random({c, c, 3, 3}, 2), b = random({c}, 3);
  for (auto _ : state)
    benchmark::DoNotOptimize(conv2d(x, k, b, ConvGeometry::same(3)));
  state.SetItemsProcessed(state.iterations() * static_cast<long>(c * c * 9 * n * n));
}
BENCHMARK(BM_Conv3x3)->Args({16, 64})->Args({32, 32})->Args({64, 16});

void BM_Conv3x3Backward(benchmark::State& state)
{
  const std::size_t c = 32, n = 32;
  const Tensor x = random({c, n, n}, 1), k = random({c, c, 3, 3}, 2), g = random({c, n, n}, 4);
  for (auto _ : state)
    benchmark::DoNotOptimize(conv2d_backward(x, k, g, ConvGeometry::same(3)));
}
BENCHMARK(BM_Conv3x3Backward);

void BM_Forward(benchmark::State& state)
{
  const NetworkParams p = build_network(NetworkConfig{}, 1);
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor x = random({13, n, n}, 5);
  for (auto _ : state)
    benchmark::DoNotOptimize(forward(p, x));
  state.SetItemsProcessed(state.iterations() * static_cast<long>(n * n));
}
BENCHMARK(BM_Forward)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_ForwardBackward(benchmark::State& state)
{
  const NetworkParams p = build_network(NetworkConfig{}, 1);
  const NetworkConfig& c = p.config;
  const Tensor x = random({13, 64, 64}, 6);
  for (auto _ : state) {
    NetCache<float> cache;
    const Tensor f = trunk_forward(c, p.tensors, x, &cache);
    const HeadOutputs<float> out = heads_forward(c, p.tensors, f, HeadSelection::all(c), &cache);
    HeadGrads<float> g{out.value, out.sigma};
    ParamMap<float> grads;
    const Tensor gf = heads_backward(c, p.tensors, cache, g, grads, true);
    trunk_backward(c, p.tensors, cache, gf, grads);
    benchmark::DoNotOptimize(grads);
  }
}
BENCHMARK(BM_ForwardBackward)->Unit(benchmark::kMillisecond);

void BM_SpectralSoftLabels(benchmark::State& state)
{
  const TileSample t = generate_scene(3, 64, 64, 0.0, 0.0);
  const auto pts = t.quality_points();
  for (auto _ : state)
    benchmark::DoNotOptimize(spectral_soft_labels(t.channels, pts, {"agbd", "ch", "cc"}));
}
BENCHMARK(BM_SpectralSoftLabels);

void BM_GenerateScene(benchmark::State& state)
{
  std::uint64_t seed = 0;
  for (auto _ : state)
    benchmark::DoNotOptimize(generate_scene(++seed, 64, 64, 0.0, 0.0));
}
BENCHMARK(BM_GenerateScene)->Unit(benchmark::kMillisecond);

void BM_FitKde(benchmark::State& state)
{
  std::mt19937_64 rng(7);
  std::gamma_distribution<double> g(2.0, 40.0);
  std::vector<double> v(static_cast<std::size_t>(state.range(0)));
  for (auto& x : v)
    x = g(rng);
  for (auto _ : state)
    benchmark::DoNotOptimize(fit_weight_table("agbd", v));
}
BENCHMARK(BM_FitKde)->Arg(1000)->Arg(100000);

void BM_TiledInference(benchmark::State& state)
{
  const NetworkParams p = build_network(NetworkConfig{}, 1);
  Raster r;
  r.channels = random({13, 256, 256}, 8);
  for (auto _ : state)
    benchmark::DoNotOptimize(tiled_inference(p, r, DeployGrid{128, 32}));
}
BENCHMARK(BM_TiledInference)->Unit(benchmark::kMillisecond);

} // namespace

BENCHMARK_MAIN();

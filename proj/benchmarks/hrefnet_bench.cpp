#include <benchmark/benchmark.h>

#include <random>

#include "hrefnet/core_model.hpp"
#include "hrefnet/data.hpp"
#include "hrefnet/dsvss.hpp"
#include "hrefnet/metrics.hpp"
#include "hrefnet/ops.hpp"

using namespace hrefnet;

namespace {

Tensor noise(const Shape& shape, std::uint64_t seed) {
  Tensor t(shape);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& v : t.values()) v = n(rng);
  return t;
}

void BM_Conv3x3(benchmark::State& state) {
  const auto c = state.range(0), side = state.range(1);
  const Var x(noise({1, c, side, side}, 1)), w(noise({c, c, 3, 3}, 2)), b(noise({c}, 3));
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d(x, w, b, {1, 1, 1, 1}).value().data());
  state.SetItemsProcessed(state.iterations() * c * c * 9 * side * side);
}
BENCHMARK(BM_Conv3x3)->Args({32, 64})->Args({64, 56})->Args({128, 28})->Unit(benchmark::kMillisecond);

void BM_SelectiveScan(benchmark::State& state) {
  const std::int64_t e = state.range(0), len = state.range(1), s = 16;
  const Var u(noise({1, e, 1, len}, 1)), dt(noise({1, e, 1, len}, 2)), a(noise({e, s}, 3));
  const Var bm(noise({1, s, 1, len}, 4)), cm(noise({1, s, 1, len}, 5)), d(noise({e}, 6)), bias(noise({e}, 7));
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(dsvss::selective_scan(u, dt, a, bm, cm, d, bias).value().data());
  state.SetItemsProcessed(state.iterations() * e * len);
}
BENCHMARK(BM_SelectiveScan)->Args({128, 56 * 56})->Args({256, 28 * 28})->Unit(benchmark::kMillisecond);

void BM_SnakeConv(benchmark::State& state) {
  const std::int64_t c = state.range(0), side = state.range(1), k = 9;
  const Var x(noise({1, c, side, side}, 1));
  Tensor st = noise({1, k, side, side}, 2);
  for (auto& v : st.values()) v = std::tanh(v);
  const Var steps(st), wx(noise({c, c * k, 1, 1}, 3)), wy(noise({c, c * k, 1, 1}, 4)), b(noise({c}, 5));
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(dsvss::snake_conv_forward(x, steps, steps, wx, wy, b, 1.0).value().data());
}
BENCHMARK(BM_SnakeConv)->Args({32, 56})->Args({64, 28})->Unit(benchmark::kMillisecond);

void BM_ForwardTiny(benchmark::State& state) {
  model::HrefNet net(ModelConfig::preset("tiny"));
  std::mt19937_64 rng(1);
  net.init(rng);
  const Var x(noise({1, 1, state.range(0), state.range(0)}, 2));
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(x, false).value().data());
}
BENCHMARK(BM_ForwardTiny)->Arg(64)->Arg(224)->Unit(benchmark::kMillisecond);

void BM_TrainStepTiny(benchmark::State& state) {
  model::HrefNet net(ModelConfig::preset("tiny"));
  std::mt19937_64 rng(1);
  net.init(rng);
  const Var x(noise({1, 1, 64, 64}, 2));
  Tensor y({1, 1, 64, 64});
  for (std::int64_t i = 0; i < y.numel(); i += 3) y[i] = 1.0;
  for (auto _ : state) {
    net.parameters().zero_grad();
    Var loss = ops::bce_with_logits(net.forward(x, true), y);
    loss.backward();
    benchmark::DoNotOptimize(loss.value().data());
  }
}
BENCHMARK(BM_TrainStepTiny)->Unit(benchmark::kMillisecond);

void BM_Metrics(benchmark::State& state) {
  data::SyntheticVesselConfig cfg;
  cfg.images = 1;
  cfg.height = cfg.width = state.range(0);
  const auto s = data::generate_synthetic(cfg).front();
  BinaryMask pred = s.vessel_mask;
  for (std::int64_t i = 0; i < pred.size(); i += 7) pred.bits[i] ^= 1;
  for (auto _ : state) {
    benchmark::DoNotOptimize(metrics::cldice(pred, s.vessel_mask));
    benchmark::DoNotOptimize(metrics::hd95(pred, s.vessel_mask));
  }
}
BENCHMARK(BM_Metrics)->Arg(128)->Arg(584)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();

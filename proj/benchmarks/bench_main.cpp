#include <benchmark/benchmark.h>

#include "binet/data.hpp"
#include "binet/metrics.hpp"
#include "binet/model.hpp"
#include "binet/tensor.hpp"
#include "binet/train.hpp"

using namespace binet;

namespace {

void BM_Conv1dForward(benchmark::State& state) {
  Rng rng(1);
  const int c = static_cast<int>(state.range(0));
  Tensor x = Tensor::uniform({c, 999}, rng, -1, 1);
  Tensor w = Tensor::uniform({c, c, 5}, rng, -0.1, 0.1);
  Tensor b = Tensor::zeros({c});
  NoGradGuard ng;
  for (auto _ : state) {
    benchmark::DoNotOptimize(conv1d(x, w, b, 1, 2));
  }
}
BENCHMARK(BM_Conv1dForward)->Arg(16)->Arg(64);

void BM_Conv1dBackward(benchmark::State& state) {
  Rng rng(2);
  const int c = static_cast<int>(state.range(0));
  Tensor x = Tensor::uniform({c, 999}, rng, -1, 1);
  Tensor w = Tensor::uniform({c, c, 5}, rng, -0.1, 0.1).set_requires_grad(true);
  Tensor b = Tensor::zeros({c}).set_requires_grad(true);
  for (auto _ : state) {
    w.zero_grad();
    b.zero_grad();
    backward(sum(conv1d(x, w, b, 1, 2)));
  }
}
BENCHMARK(BM_Conv1dBackward)->Arg(16)->Arg(64);

void BM_Matmul(benchmark::State& state) {
  Rng rng(3);
  const int n = static_cast<int>(state.range(0));
  Tensor a = Tensor::uniform({n, n}, rng, -1, 1);
  Tensor b = Tensor::uniform({n, n}, rng, -1, 1);
  NoGradGuard ng;
  for (auto _ : state) {
    benchmark::DoNotOptimize(matmul(a, b));
  }
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128);

void BM_FusionIteration(benchmark::State& state) {
  ModelConfig mc;
  BinModel model(mc, 4);
  Rng rng(5);
  Tensor s = Tensor::uniform({1, mc.T}, rng, -1, 1);
  Tensor v = Tensor::uniform({mc.M * mc.d_v, mc.F_V}, rng, -1, 1);
  NoGradGuard ng;
  Tensor eA = model.encode_audio(s);
  Tensor eV = model.encode_video(v);
  FusionState st = model.fusion_step(model.init_fusion_state(), eA, eV);
  for (auto _ : state) {
    benchmark::DoNotOptimize(model.fusion_step(st, eA, eV));
  }
}
BENCHMARK(BM_FusionIteration);

void BM_SeparateForward(benchmark::State& state) {
  ModelConfig mc;
  mc.R = static_cast<int>(state.range(0));
  BinModel model(mc, 6);
  Rng rng(7);
  Tensor s = Tensor::uniform({1, mc.T}, rng, -1, 1);
  Tensor v = Tensor::uniform({mc.M * mc.d_v, mc.F_V}, rng, -1, 1);
  NoGradGuard ng;
  for (auto _ : state) {
    benchmark::DoNotOptimize(model.separate(s, v));
  }
}
BENCHMARK(BM_SeparateForward)->Arg(4)->Arg(8);

void BM_TrainStep(benchmark::State& state) {
  ModelConfig mc;
  BinModel model(mc, 8);
  Rng rng(9);
  Tensor s = Tensor::uniform({1, mc.T}, rng, -1, 1);
  Tensor v = Tensor::uniform({mc.M * mc.d_v, mc.F_V}, rng, -1, 1);
  Tensor ref = Tensor::uniform({mc.M, mc.T}, rng, -1, 1);
  for (auto _ : state) {
    model.params().zero_grads();
    backward(separation_loss(model.separate(s, v), ref));
  }
}
BENCHMARK(BM_TrainStep);

void BM_SeparationLossBackward(benchmark::State& state) {
  Rng rng(10);
  Tensor est = Tensor::uniform({2, 16000}, rng, -1, 1).set_requires_grad(true);
  Tensor ref = Tensor::uniform({2, 16000}, rng, -1, 1);
  for (auto _ : state) {
    est.zero_grad();
    backward(separation_loss(est, ref));
  }
}
BENCHMARK(BM_SeparationLossBackward);

void BM_SiSdr(benchmark::State& state) {
  Rng rng(11);
  std::vector<double> est(16000), ref(16000);
  for (auto& x : est) x = rng.uniform(-1, 1);
  for (auto& x : ref) x = rng.uniform(-1, 1);
  for (auto _ : state) {
    benchmark::DoNotOptimize(si_sdr(est, ref));
  }
}
BENCHMARK(BM_SiSdr);

void BM_SynthSource(benchmark::State& state) {
  uint64_t i = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(synth_source(derive_seed(42, i++), 16000, 16000, 50, 8));
  }
}
BENCHMARK(BM_SynthSource);

}  // namespace

BENCHMARK_MAIN();

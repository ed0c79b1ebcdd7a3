// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include "tofa/ops.hpp"
#include "tofa/random.hpp"

using namespace tofa;

namespace {

Tensor normal_tensor(const Shape& shape, Rng& rng, bool grad = false) {
  Tensor t(shape, grad);
  for (auto& v : t.data()) v = static_cast<float>(normal(rng));
  return t;
}

// args: batch, channels, side, kernel
void BM_Conv2dDense(benchmark::State& state) {
  Rng rng = make_stream(1, 1);
  const int n = static_cast<int>(state.range(0)), c = static_cast<int>(state.range(1));
  const int h = static_cast<int>(state.range(2)), k = static_cast<int>(state.range(3));
  const Tensor x = normal_tensor({n, c, h, h}, rng);
  const Tensor w = normal_tensor({c, c, k, k}, rng);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d(x, w, nullptr, {1, k / 2, 1, -1, -1}));
  state.SetItemsProcessed(state.iterations() * n * c * c * h * h * k * k);
}
BENCHMARK(BM_Conv2dDense)->Args({16, 16, 16, 1})->Args({16, 32, 8, 1})->Args({16, 16, 16, 3});

void BM_Conv2dDepthwise(benchmark::State& state) {
  Rng rng = make_stream(2, 1);
  const int n = static_cast<int>(state.range(0)), c = static_cast<int>(state.range(1));
  const int h = static_cast<int>(state.range(2)), k = static_cast<int>(state.range(3));
  const Tensor x = normal_tensor({n, c, h, h}, rng);
  const Tensor w = normal_tensor({c, 1, k, k}, rng);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d(x, w, nullptr, {1, k / 2, c, -1, -1}));
  state.SetItemsProcessed(state.iterations() * n * c * h * h * k * k);
}
BENCHMARK(BM_Conv2dDepthwise)->Args({16, 96, 16, 3})->Args({16, 96, 16, 5})->Args({16, 240, 8, 5});

void BM_Conv2dBackward(benchmark::State& state) {
  Rng rng = make_stream(3, 1);
  const int c = static_cast<int>(state.range(0)), k = static_cast<int>(state.range(1));
  const int groups = state.range(2) ? c : 1;
  Tensor x = normal_tensor({16, c, 16, 16}, rng, true);
  Tensor w = normal_tensor({c, groups == 1 ? c : 1, k, k}, rng, true);
  for (auto _ : state) {
    x.zero_grad();
    w.zero_grad();
    ops::sum(ops::conv2d(x, w, nullptr, {1, k / 2, groups, -1, -1})).backward();
  }
}
BENCHMARK(BM_Conv2dBackward)->Args({32, 1, 0})->Args({96, 3, 1})->Args({96, 5, 1});

void BM_BatchNormTrain(benchmark::State& state) {
  Rng rng = make_stream(4, 1);
  const int c = static_cast<int>(state.range(0));
  const Tensor x = normal_tensor({16, c, 16, 16}, rng);
  const Tensor g = Tensor::filled({c}, 1.0f), b({c});
  Tensor rm({c}), rv = Tensor::filled({c}, 1.0f);
  ops::BatchNormOptions o;
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(ops::batchnorm2d(x, g, b, rm, rv, o));
}
BENCHMARK(BM_BatchNormTrain)->Arg(16)->Arg(96);

}  // namespace

// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include "tofa/data.hpp"
#include "tofa/optim.hpp"
#include "tofa/runtime.hpp"
#include "tofa/search_space.hpp"
#include "tofa/supernet.hpp"
#include "tofa/trainer.hpp"

using namespace tofa;

namespace {

SubnetConfig pick(const SearchSpace& s, int which) {
  return anchor(s, which == 0 ? Anchor::kMin : Anchor::kMax);
}

// arg: 0 = minnet, 1 = maxnet
void BM_SupernetForwardEval(benchmark::State& state) {
  Rng rng = make_stream(10, 1);
  Supernet net(bundled_profile("desk-small"), 4, rng);
  const SubnetConfig c = pick(net.space(), static_cast<int>(state.range(0)));
  const Tensor x = Tensor::filled({16, 3, c.resolution, c.resolution}, 0.1f);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(c, x, {}));
  state.counters["MMACs/img"] = static_cast<double>(flops(net.space(), c, 4)) / 1e6;
}
BENCHMARK(BM_SupernetForwardEval)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_StandaloneForward(benchmark::State& state) {
  Rng rng = make_stream(11, 1);
  Supernet net(bundled_profile("desk-small"), 4, rng);
  const SubnetConfig c = pick(net.space(), static_cast<int>(state.range(0)));
  const StandaloneNet m = materialize(net, c);
  const Tensor x = Tensor::filled({1, 3, c.resolution, c.resolution}, 0.1f);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(m.forward(x));
}
BENCHMARK(BM_StandaloneForward)->Arg(0)->Arg(1)->Unit(benchmark::kMicrosecond);

// One sandwich iteration at batch 16/16; arg is the loss variant index.
void BM_TrainStep(benchmark::State& state) {
  configure_allocator();
  const Dataset ds = make_synthetic({4, 16, 64, 12});
  auto [labeled, unlabeled] = split_labeled(ds, 8, 1);
  Rng rng = make_stream(12, 1);
  Supernet net(bundled_profile("desk-small"), 4, rng);
  Sgd opt(net.parameters(), 0.9f, 1e-5f);
  TrainConfig cfg;
  cfg.batch_l = cfg.batch_u = 16;
  cfg.variant = static_cast<LossVariant>(state.range(0));
  const Normalization norm = compute_normalization(labeled);
  Rng aug = make_stream(12, 2), arch = make_stream(12, 3), noise = make_stream(12, 4);
  const int res = anchor(net.space(), Anchor::kMax).resolution;
  std::vector<int> idx(16);
  for (int i = 0; i < 16; ++i) idx[static_cast<std::size_t>(i)] = i;
  const StepBatches b{make_labeled_batch(labeled, idx, aug, res, norm),
                      make_unlabeled_batch(unlabeled, idx, aug, res, norm)};
  for (auto _ : state) benchmark::DoNotOptimize(train_step(net, opt, b, cfg, 0.01, arch, noise));
  state.SetLabel(std::string(to_string(cfg.variant)));
}
BENCHMARK(BM_TrainStep)->DenseRange(0, 3)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();

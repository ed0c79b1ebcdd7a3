// SPDX-License-Identifier: Apache-2.0
// End-to-end acceptance gate. One PASS/FAIL line per criterion; the exit code
// is non-zero when any selected criterion fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "oracles.hpp"
#include "tofa/checkpoint.hpp"
#include "tofa/error.hpp"
#include "tofa/ops.hpp"
#include "tofa/optim.hpp"
#include "tofa/runtime.hpp"
#include "tofa/selection.hpp"
#include "tofa/semi_losses.hpp"
#include "tofa/trainer.hpp"

using namespace tofa;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string fmt(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

std::string join(const std::vector<double>& v, int digits = 1) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : ",") + fmt(x, digits);
  return s;
}

Supernet desk_net(std::uint64_t seed, int classes = 4) {
  Rng rng = make_stream(seed, 0xacc);
  return Supernet(bundled_profile("desk-small"), classes, rng);
}

// Inputs kept off the kinks of relu and hardswish so central differences are
// well defined.
Tensor smooth_input(const Shape& shape, Rng& rng) {
  Tensor t(shape, true);
  for (auto& v : t.data()) {
    double x = normal(rng) * 2.0;
    for (double k : {-3.0, 0.0, 3.0})
      if (std::abs(x - k) < 0.05) x = k + 0.1;
    v = static_cast<float>(x);
  }
  return t;
}

// ---------------------------------------------------------------------------
// 1. Finite-difference gradient checks

Verdict gradient_checks() {
  constexpr double kTol = 1e-3;
  const auto t0 = Clock::now();
  Rng rng = make_stream(1001, 1);
  using Fn = std::function<Tensor(const std::vector<Tensor>&)>;
  std::map<std::string, std::pair<double, int>> worst;  // primitive -> (err, shapes)
  auto check = [&](const std::string& name, const Fn& f, std::vector<Tensor> in) {
    const double e = oracle::grad_check(f, std::move(in), rng).worst_rel_err;
    auto& w = worst[name];
    w.first = std::max(w.first, std::isfinite(e) ? e : 1e300);
    ++w.second;
  };
  for (int trial = 0; trial < 5; ++trial) {
    const Shape s{1 + trial, 2 + trial % 3, 3};
    Tensor a = smooth_input(s, rng), b = smooth_input(s, rng);
    check("add", [](auto& in) { return ops::add(in[0], in[1]); }, {a, b});
    check("mul", [](auto& in) { return ops::mul(in[0], in[1]); }, {a, b});
    check("scale", [](auto& in) { return ops::scale(in[0], -1.7f); }, {a});
    check("relu", [](auto& in) { return ops::relu(in[0]); }, {a});
    check("hardswish", [](auto& in) { return ops::hardswish(in[0]); }, {a});
    check("sigmoid", [](auto& in) { return ops::sigmoid(in[0]); }, {a});
    check("sum", [](auto& in) { return ops::sum(in[0]); }, {a});
    check("mean", [](auto& in) { return ops::mean(in[0]); }, {a});

    const int n = 1 + trial % 2, c = 2 + trial, h = 3 + trial % 3;
    Tensor x = oracle::random_tensor({n, c, h, h}, rng, 1.0f, true);
    Tensor gate = oracle::random_tensor({n, c}, rng, 1.0f, true);
    check("global_avg_pool", [](auto& in) { return ops::global_avg_pool(in[0]); }, {x});
    check("pad2d", [](auto& in) { return ops::pad2d(in[0], 2); }, {x});
    check("mul_channel", [](auto& in) { return ops::mul_channel(in[0], in[1]); }, {x, gate});

    const int cin = 2 + trial % 3, hc = 5 + trial % 3, k = trial % 2 ? 5 : 3, stride = 1 + trial % 2;
    Tensor xc = oracle::random_tensor({2, cin, hc, hc}, rng, 1.0f, true);
    Tensor w = oracle::random_tensor({4, cin, k, k}, rng, 0.5f, true);
    Tensor bias = oracle::random_tensor({4}, rng, 0.5f, true);
    const ops::Conv2dOptions od{stride, k / 2, 1, 3, k == 5 ? 3 : -1};
    check("conv2d", [od](auto& in) { return ops::conv2d(in[0], in[1], &in[2], od); }, {xc, w, bias});
    Tensor wd = oracle::random_tensor({cin + 1, 1, k, k}, rng, 0.5f, true);
    const ops::Conv2dOptions dw{stride, k / 2, cin, cin, -1};
    check("depthwise_conv2d", [dw](auto& in) { return ops::conv2d(in[0], in[1], nullptr, dw); }, {xc, wd});

    const int fi = 3 + trial, fo = 2 + trial;
    Tensor xl = oracle::random_tensor({1 + trial, fi}, rng, 1.0f, true);
    Tensor wl = oracle::random_tensor({fo + 2, fi}, rng, 0.5f, true);
    Tensor bl = oracle::random_tensor({fo + 2}, rng, 0.5f, true);
    check("linear", [fo](auto& in) { return ops::linear(in[0], in[1], &in[2], fo); }, {xl, wl, bl});

    const int cb = 2 + trial % 3;
    Tensor xb = oracle::random_tensor({2 + trial % 2, cb, 3, 3}, rng, 1.0f, true);
    Tensor gb = oracle::random_tensor({cb + 1}, rng, 0.5f, true);
    Tensor bb = oracle::random_tensor({cb + 1}, rng, 0.5f, true);
    check("batchnorm2d",
          [cb](auto& in) {
            Tensor rm({cb + 1}), rv = Tensor::filled({cb + 1}, 1.0f);
            ops::BatchNormOptions o;
            o.update_running = false;
            return ops::batchnorm2d(in[0], in[1], in[2], rm, rv, o);
          },
          {xb, gb, bb});

    Tensor logits = oracle::random_tensor({2 + trial, 3 + trial % 3}, rng, 2.0f, true);
    const Tensor target = ops::softmax(oracle::random_tensor(logits.shape(), rng));
    check("soft_cross_entropy", [target](auto& in) { return ops::soft_cross_entropy(in[0], target); }, {logits});
  }
  const double secs = seconds_since(t0);
  double max_err = 0.0;
  std::string worst_name;
  bool ok = secs < 120.0;
  for (const auto& [name, w] : worst) {
    ok = ok && w.first < kTol && w.second >= 5;
    if (w.first >= max_err) max_err = w.first, worst_name = name;
  }
  return {ok, std::to_string(worst.size()) + " primitives x 5 shapes, worst rel err " + sci(max_err) + " (" +
                  worst_name + "), " + fmt(secs, 1) + " s"};
}

// ---------------------------------------------------------------------------
// 2. Convolution against direct loops

// Error of one output scaled by max(1, |reference|): float32 cannot hold
// outputs in the tens to 1e-5 absolute, so large values are judged in ulps.
double scaled_error(std::span<const float> y, std::span<const float> ref) {
  double e = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double r = ref[i];
    e = std::max(e, std::abs(static_cast<double>(y[i]) - r) / std::max(1.0, std::abs(r)));
  }
  return e;
}

Verdict conv_oracle() {
  Rng rng = make_stream(1002, 1);
  double worst = 0.0, peak = 0.0, scaled = 0.0;
  int cases = 0;
  for (int trial = 0; trial < 20; ++trial) {
    // Dense, depthwise and elastic (leading filters, centered crop) per case.
    const int n = 1 + static_cast<int>(uniform_index(rng, 3));
    const int cin = 1 + static_cast<int>(uniform_index(rng, 6));
    const int cout = 1 + static_cast<int>(uniform_index(rng, 8));
    const int k = uniform_index(rng, 2) ? 3 : 5;
    const int h = k + static_cast<int>(uniform_index(rng, 8));
    const int stride = 1 + static_cast<int>(uniform_index(rng, 2));
    const int pad = static_cast<int>(uniform_index(rng, 3));
    Tensor x = oracle::random_tensor({n, cin, h, h}, rng);
    Tensor w = oracle::random_tensor({cout + 2, cin, k, k}, rng);
    Tensor b = oracle::random_tensor({cout + 2}, rng);
    const Tensor* bias = trial % 2 ? &b : nullptr;
    const int kk = k == 5 && trial % 3 == 0 ? 3 : -1;
    const int pk = kk > 0 ? kk / 2 : pad;
    const Tensor y = ops::conv2d(x, w, bias, {stride, pk, 1, cout, kk});
    const Tensor ref = oracle::naive_conv2d(x, w, bias, stride, pk, 1, cout, kk);
    if (y.shape() != ref.shape()) return {false, "shape mismatch in dense case " + std::to_string(trial)};
    worst = std::max(worst, oracle::max_abs_diff(y.data(), ref.data()));
    scaled = std::max(scaled, scaled_error(y.data(), ref.data()));
    for (float v : ref.data()) peak = std::max(peak, static_cast<double>(std::abs(v)));

    const int c = 1 + static_cast<int>(uniform_index(rng, 12));
    Tensor xd = oracle::random_tensor({n, c, h, h}, rng);
    Tensor wd = oracle::random_tensor({c + 3, 1, k, k}, rng);
    const int pd = (kk > 0 ? kk : k) / 2;
    const Tensor yd = ops::conv2d(xd, wd, nullptr, {stride, pd, c, c, kk});
    const Tensor rd = oracle::naive_conv2d(xd, wd, nullptr, stride, pd, c, c, kk);
    if (yd.shape() != rd.shape()) return {false, "shape mismatch in depthwise case " + std::to_string(trial)};
    worst = std::max(worst, oracle::max_abs_diff(yd.data(), rd.data()));
    scaled = std::max(scaled, scaled_error(yd.data(), rd.data()));
    cases += 2;
  }
  return {scaled < 1e-5, std::to_string(cases) + " cases (20 dense, 20 depthwise), max error / max(1,|y|) " +
                            sci(scaled) + " (abs " + sci(worst) + ", peak |y| " + fmt(peak, 1) + ")"};
}

// ---------------------------------------------------------------------------
// 3. Weight-sharing equivalence

void scramble_bn(Supernet& net, Rng& rng) {
  for (auto& p : net.state()) {
    auto d = p.tensor.data();
    if (p.name.ends_with("running_mean")) {
      for (auto& v : d) v = static_cast<float>(0.3 * normal(rng));
    } else if (p.name.ends_with("running_var")) {
      for (auto& v : d) v = static_cast<float>(uniform(rng, 0.5, 2.0));
    }
  }
}

Verdict weight_sharing() {
  Supernet net = desk_net(1003);
  Rng rng = make_stream(1003, 1);
  scramble_bn(net, rng);
  double worst = 0.0;
  int param_mismatch = 0;
  for (int i = 0; i < 50; ++i) {
    const auto c = sample_uniform(net.space(), rng);
    const Tensor x = oracle::random_tensor({2, 3, c.resolution, c.resolution}, rng);
    NoGradGuard ng;
    const Tensor shared = net.forward(c, x, {});
    const StandaloneNet alone = materialize(net, c);
    worst = std::max(worst, oracle::max_abs_diff(shared.data(), alone.forward(x).data()));
    param_mismatch += alone.parameter_count() != param_count(net.space(), c, 4);
  }
  return {worst < 1e-5 && param_mismatch == 0,
          "50 configs, max abs diff " + sci(worst) + ", param-count mismatches " + std::to_string(param_mismatch)};
}

// ---------------------------------------------------------------------------
// 4. Gradient locality

bool inside(const std::vector<std::pair<int, int>>& box, const Shape& shape, std::size_t flat) {
  std::vector<int> idx(shape.size());
  for (std::size_t d = shape.size(); d-- > 0;) {
    idx[d] = static_cast<int>(flat % static_cast<std::size_t>(shape[d]));
    flat /= static_cast<std::size_t>(shape[d]);
  }
  for (std::size_t d = 0; d < shape.size(); ++d)
    if (idx[d] < box[d].first || idx[d] >= box[d].second) return false;
  return true;
}

Verdict gradient_locality() {
  Supernet net = desk_net(1004);
  Rng rng = make_stream(1004, 1);
  long outside = 0, configs_without_grad = 0;
  for (int i = 0; i < 20; ++i) {
    const auto c = sample_uniform(net.space(), rng);
    for (auto& p : net.parameters()) p.tensor.zero_grad();
    const Tensor x = oracle::random_tensor({4, 3, c.resolution, c.resolution}, rng);
    ForwardOptions o;
    o.mode = ops::Mode::kTrain;
    o.dropout = 0.3f;
    o.drop_connect = 0.2f;
    o.rng = &rng;
    const Tensor y = net.forward(c, x, o);
    ops::sum(ops::mul(y, oracle::random_tensor(y.shape(), rng))).backward();
    const auto active = oracle::expected_active(net.space(), c, 4);
    long nonzero = 0;
    for (auto& p : net.parameters()) {
      if (!p.tensor.has_grad()) continue;
      const auto g = p.tensor.grad();
      const auto it = active.find(p.name);
      for (std::size_t k = 0; k < g.size(); ++k) {
        const bool in = it != active.end() && inside(it->second, p.tensor.shape(), k);
        if (g[k] != 0.0f) (in ? nonzero : outside) += 1;
      }
    }
    configs_without_grad += nonzero == 0;
  }
  return {outside == 0 && configs_without_grad == 0,
          "20 configs, nonzero gradients outside active slices: " + std::to_string(outside)};
}

// ---------------------------------------------------------------------------
// 5. Analytic cost model

Verdict flops_model() {
  Supernet net = desk_net(1005);
  Rng rng = make_stream(1005, 1);
  int mismatches = 0;
  for (int i = 0; i < 20; ++i) {
    const auto c = sample_uniform(net.space(), rng);
    const Tensor x = oracle::random_tensor({1, 3, c.resolution, c.resolution}, rng);
    std::uint64_t macs = 0;
    ops::set_mac_counter(&macs);
    {
      NoGradGuard ng;
      (void)net.forward(c, x, {});
    }
    ops::set_mac_counter(nullptr);
    mismatches += flops(net.space(), c, 4) != macs;
  }
  const SearchSpace table = bundled_profile("mbv3-large7");
  const double max_m = static_cast<double>(flops(table, anchor(table, Anchor::kMax))) / 1e6;
  const double min_m = static_cast<double>(flops(table, anchor(table, Anchor::kMin))) / 1e6;
  const bool ok = mismatches == 0 && max_m < 2500.0 && min_m > 200.0;
  return {ok, "20 configs, mismatches " + std::to_string(mismatches) + "; mbv3-large7 maxnet " + fmt(max_m, 1) +
                  " MFlops (< 2500), minnet " + fmt(min_m, 1) + " MFlops (> 200)"};
}

// ---------------------------------------------------------------------------
// 6. Sampler uniformity and sandwich composition

Verdict sampler_and_sandwich() {
  const SearchSpace s = bundled_profile("desk-small");
  Rng rng = make_stream(1006, 1);
  std::map<std::string, std::map<int, long>> seen;
  for (int i = 0; i < 10000; ++i) {
    const auto c = sample_uniform(s, rng);
    seen["res"][c.resolution]++;
    for (std::size_t st = 0; st < c.stages.size(); ++st) {
      const std::string p = "s" + std::to_string(st + 1) + ".";
      seen[p + "width"][c.stages[st].width]++;
      seen[p + "depth"][c.stages[st].depth]++;
      seen[p + "kernel"][c.stages[st].kernel]++;
      seen[p + "expansion"][c.stages[st].expansion]++;
    }
    seen["head"][c.head_width]++;
  }
  int dims = 0, rejected = 0;
  double worst_ratio = 0.0;
  for (const auto& [dim, hist] : seen) {
    if (hist.size() < 2) continue;
    std::vector<long> counts;
    for (const auto& [v, k] : hist) counts.push_back(k);
    const double stat = oracle::chi_square_uniform(counts);
    const double crit = oracle::chi_square_critical(static_cast<int>(counts.size()) - 1, 0.01);
    worst_ratio = std::max(worst_ratio, stat / crit);
    rejected += stat >= crit;
    ++dims;
  }

  // Every step trains exactly {maxnet, two fresh uniform draws, minnet}.
  auto [labeled, unlabeled] = split_labeled(oracle::tiny_dataset(120, 4, 16, 1006), 3, 1);
  Supernet net = desk_net(1006);
  Sgd opt(net.parameters(), 0.9f, 1e-5f);
  TrainConfig cfg;
  cfg.batch_l = cfg.batch_u = 4;
  const Normalization norm = compute_normalization(labeled);
  Rng aug = make_stream(1006, 3), arch = make_stream(1006, 4), noise = make_stream(1006, 5);
  const auto mx = anchor(s, Anchor::kMax), mn = anchor(s, Anchor::kMin);
  std::vector<int> idx{0, 1, 2, 3};
  const StepBatches b{make_labeled_batch(labeled, idx, aug, mx.resolution, norm),
                      make_unlabeled_batch(unlabeled, idx, aug, mx.resolution, norm)};
  int bad_steps = 0;
  for (int step = 0; step < 10; ++step) {
    Rng replay = arch;
    const SubnetConfig r1 = sample_uniform(s, replay), r2 = sample_uniform(s, replay);
    const StepOutcome out = train_step(net, opt, b, cfg, 0.01, arch, noise);
    const bool ok = out.trained.size() == 4 && out.trained[0] == mx && out.trained[1] == r1 &&
                    out.trained[2] == r2 && out.trained[3] == mn && out.report.distill_terms.size() == 3;
    bad_steps += !ok;
  }
  return {rejected == 0 && bad_steps == 0,
          std::to_string(dims) + " dimensions over 10000 draws, rejections at alpha=0.01: " +
              std::to_string(rejected) + " (max stat/critical " + fmt(worst_ratio, 2) +
              "); sandwich steps off-pattern: " + std::to_string(bad_steps) + "/10"};
}

// ---------------------------------------------------------------------------
// 7. Ledger semantics and zero-cost selection

Verdict ledger_and_selection() {
  auto [labeled, unlabeled] = split_labeled(oracle::tiny_dataset(80, 4, 16, 1007), 3, 2);
  Supernet net = desk_net(1007);
  TrainConfig cfg;
  const long T = 12;
  cfg.max_iters = T;
  cfg.batch_l = cfg.batch_u = 4;
  cfg.seed = 7;
  cfg.bn_recalib_batches = 1;
  const TrainResult r = train(net, labeled, unlabeled, cfg);
  const SampleLedger& l = r.ledger;
  const bool replay_ok = SampleLedger::replay(l.log(), l.min_key(), l.max_key()) == l;
  const bool triangular = l.index(l.min_key()) == T * (T + 1) / 2 && l.index(l.max_key()) == T * (T + 1) / 2;
  // Independent recount of s(a) from the per-iteration sample lists.
  std::map<std::string, long> recount;
  for (const auto& it : r.log.iters) {
    std::set<std::string> keys{l.max_key(), l.min_key(), it.r1, it.r2};
    for (const auto& k : keys) recount[k] += it.t;
  }
  bool recount_ok = recount.size() == l.entries().size();
  for (const auto& [k, e] : l.entries()) recount_ok = recount_ok && recount[k] == e.s;

  const SearchSpace& s = net.space();
  const CostFn cost = [&s](const SubnetConfig& c) { return static_cast<double>(flops(s, c, 4)); };
  const double lo = cost(anchor(s, Anchor::kMin)), hi = cost(anchor(s, Anchor::kMax));
  Rng rng = make_stream(1007, 9);
  const std::array rules{SelectionRule::kLastSampled, SelectionRule::kFirstSampled,
                         SelectionRule::kClosestToBudget};
  int agree = 0;
  for (int trial = 0; trial < 100; ++trial) {
    // Fresh synthetic ledgers with repeated draws so ties occur.
    SampleLedger led(l.min_key(), l.max_key());
    std::vector<SubnetConfig> pool;
    for (int i = 0; i < 10; ++i) pool.push_back(sample_uniform(s, rng));
    const long iters = 5 + static_cast<long>(uniform_index(rng, 30));
    for (long t = 1; t <= iters; ++t)
      led.update({pool[uniform_index(rng, pool.size())], pool[uniform_index(rng, pool.size())],
                  anchor(s, Anchor::kMin)},
                 anchor(s, Anchor::kMax), t);
    const double budget = uniform(rng, lo * 0.9, hi * 1.05);
    const auto rule = rules[uniform_index(rng, rules.size())];
    const bool excl = trial % 4 != 0;
    const auto want = oracle::brute_select(led, s, cost, budget, rule, excl);
    try {
      const Selected got = select_fixed(led, s, cost, budget, rule, excl);
      agree += want && got.key == want->key && got.s == want->s && got.cost == want->cost;
    } catch (const InfeasibleBudget&) {
      agree += !want;
    }
  }
  return {replay_ok && triangular && recount_ok && agree == 100,
          std::string("replay ") + (replay_ok ? "equal" : "differs") + ", s(min)=" +
              std::to_string(l.index(l.min_key())) + " (T(T+1)/2=" + std::to_string(T * (T + 1) / 2) +
              "), recount " + (recount_ok ? "equal" : "differs") + ", select_fixed==brute force on " +
              std::to_string(agree) + "/100 triples"};
}

// ---------------------------------------------------------------------------
// 8. Pseudo-label masking

Verdict fixmatch_masking() {
  Rng rng = make_stream(1008, 1);
  const float tau = 0.95f;
  int failures = 0;
  for (float top : {0.25f, 0.6f, 0.9f, tau}) {
    Tensor weak({8, 4});
    const float rest = (1.0f - top) / 3.0f;
    for (int r = 0; r < 8; ++r)
      for (int k = 0; k < 4; ++k) weak.data()[static_cast<std::size_t>(r * 4 + k)] = k == r % 4 ? top : rest;
    Tensor strong = oracle::random_tensor({8, 4}, rng, 3.0f, true);
    auto res = fixmatch_loss(weak, strong, tau, 0.1f);
    res.loss.backward();
    bool zero = res.mask_count == 0 && res.loss.item() == 0.0f;
    for (float g : strong.grad()) zero = zero && g == 0.0f;
    failures += !zero;
  }
  // Just above the threshold every row counts.
  Tensor weak({4, 4});
  const float above = std::nextafter(tau, 1.0f);
  for (int r = 0; r < 4; ++r)
    for (int k = 0; k < 4; ++k)
      weak.data()[static_cast<std::size_t>(r * 4 + k)] = k == r ? above : (1.0f - above) / 3.0f;
  Tensor strong = oracle::random_tensor({4, 4}, rng, 1.0f, true);
  const int masked = fixmatch_loss(weak, strong, tau, 0.1f).mask_count;
  return {failures == 0 && masked == 4, "rows at or below tau give exactly zero loss and gradient (" +
                                            std::to_string(4 - failures) + "/4 levels); rows just above tau masked " +
                                            std::to_string(masked) + "/4"};
}

// ---------------------------------------------------------------------------
// 9-12. Training experiments on the synthetic task

constexpr int kSeeds = 5;
constexpr long kIters = 2000;
constexpr int kLabelsPerClass = 10;  // 40 labels over C=4

struct Task {
  Dataset labeled, unlabeled;
};

Task make_task(std::uint64_t seed) {
  const Dataset train = make_synthetic({4, 16, 2400, 100 + seed});
  auto [l, u] = split_labeled(train, kLabelsPerClass, seed);
  return {std::move(l), std::move(u)};
}

const Dataset& test_set() {
  static const Dataset d = make_synthetic({4, 16, 1000, 999});
  return d;
}

const Dataset& val_set() {
  static const Dataset d = make_synthetic({4, 16, 500, 998});
  return d;
}

TrainConfig run_config(LossVariant v, std::uint64_t seed, long iters) {
  TrainConfig cfg;
  cfg.max_iters = iters;
  cfg.variant = v;
  cfg.seed = seed;
  cfg.batch_l = 16;
  cfg.batch_u = 16;
  return cfg;
}

struct Pretrained {
  fs::path checkpoint;
  double source_acc = 0.0;
  double seconds = 0.0;
};

// Labeled-only supernet training on the shape-discrimination source task,
// shared by every seed as the initialization of the target runs.
const Pretrained& pretrained(const fs::path& work) {
  static std::optional<Pretrained> p;
  if (p) return *p;
  const auto t0 = Clock::now();
  Pretrained out;
  out.checkpoint = work / "source.ckpt";
  const Dataset source = make_synthetic({8, 16, 4000, 5001, SynthTask::kShape});
  Rng rng = make_stream(1, 7);
  Supernet net(bundled_profile("desk-small"), 8, rng);
  TrainConfig cfg;
  cfg.max_iters = kIters;
  cfg.batch_l = 32;
  cfg.seed = 1;
  const TrainResult r = pretrain(net, source, cfg, out.checkpoint);
  const Dataset source_test = make_synthetic({8, 16, 800, 777, SynthTask::kShape});
  out.source_acc = evaluate_subnet(net, anchor(net.space(), Anchor::kMax), source_test, r.norm, r.calibration,
                                   cfg.bn_recalib_batches);
  out.seconds = seconds_since(t0);
  p = out;
  return *p;
}

struct RunOutcome {
  double max_acc = 0.0, min_acc = 0.0;
  std::optional<Supernet> net;
  TrainResult result;
};

RunOutcome run_once(const Task& task, LossVariant v, std::uint64_t seed, long iters,
                    const std::optional<fs::path>& init, bool keep) {
  Supernet net = init ? load_checkpoint(*init, true, 4, seed) : [&] {
    Rng rng = make_stream(seed, 7);
    return Supernet(bundled_profile("desk-small"), 4, rng);
  }();
  const TrainConfig cfg = run_config(v, seed, iters);
  RunOutcome out;
  out.result = train(net, task.labeled, task.unlabeled, cfg);
  const auto& space = net.space();
  out.max_acc = 100.0 * evaluate_subnet(net, anchor(space, Anchor::kMax), test_set(), out.result.norm,
                                        out.result.calibration, cfg.bn_recalib_batches);
  out.min_acc = 100.0 * evaluate_subnet(net, anchor(space, Anchor::kMin), test_set(), out.result.norm,
                                        out.result.calibration, cfg.bn_recalib_batches);
  if (keep) out.net = std::move(net);
  return out;
}

struct Ablation {
  std::map<LossVariant, std::vector<double>> max_acc, min_acc;
  std::vector<RunOutcome> full_runs;  // kept for selection
  double seconds = 0.0;
  bool done = false;
};

Ablation& ablation(const fs::path& work) {
  static Ablation a;
  if (a.done) return a;
  const auto t0 = Clock::now();
  const Pretrained& pre = pretrained(work);
  std::cout << "  source pretraining: max-net accuracy " << fmt(100.0 * pre.source_acc, 1) << "% in "
            << fmt(pre.seconds, 0) << " s" << std::endl;
  for (int seed = 1; seed <= kSeeds; ++seed) {
    const Task task = make_task(static_cast<std::uint64_t>(seed));
    for (LossVariant v : {LossVariant::kLab, LossVariant::kLabFm, LossVariant::kLabDist, LossVariant::kFull}) {
      const auto ts = Clock::now();
      RunOutcome r = run_once(task, v, static_cast<std::uint64_t>(seed), kIters, pre.checkpoint,
                              v == LossVariant::kFull);
      std::cout << "  seed " << seed << " " << to_string(v) << ": maxnet " << fmt(r.max_acc, 1) << " minnet "
                << fmt(r.min_acc, 1) << " (" << fmt(seconds_since(ts), 0) << " s)" << std::endl;
      a.max_acc[v].push_back(r.max_acc);
      a.min_acc[v].push_back(r.min_acc);
      if (v == LossVariant::kFull) a.full_runs.push_back(std::move(r));
    }
  }
  a.seconds = seconds_since(t0);
  a.done = true;
  return a;
}

Verdict ssl_ablation_maxnet(const fs::path& work) {
  Ablation& a = ablation(work);
  const double lab = median(a.max_acc[LossVariant::kLab]), fm = median(a.max_acc[LossVariant::kLabFm]),
               dist = median(a.max_acc[LossVariant::kLabDist]), full = median(a.max_acc[LossVariant::kFull]);
  const bool order = lab < dist && dist <= full && lab < fm && fm <= full;
  const bool gain = full - lab >= 2.0;
  const bool time = a.seconds < 3600.0;
  return {order && gain && time,
          "median maxnet LAB " + fmt(lab) + ", LAB_FM " + fmt(fm) + ", LAB_DIST " + fmt(dist) + ", FULL " +
              fmt(full) + " (FULL-LAB " + fmt(full - lab) + ", need >= 2.0; LAB<LAB_DIST<=FULL " +
              (lab < dist && dist <= full ? "yes" : "no") + ", LAB<LAB_FM<=FULL " +
              (lab < fm && fm <= full ? "yes" : "no") + "); " + std::to_string(kSeeds * 4) + " runs in " +
              fmt(a.seconds / 60.0, 1) + " min"};
}

Verdict ssl_ablation_minnet(const fs::path& work) {
  Ablation& a = ablation(work);
  const double lab = median(a.min_acc[LossVariant::kLab]), full = median(a.min_acc[LossVariant::kFull]);
  return {full - lab >= 2.0, "median minnet LAB " + fmt(lab) + " [" + join(a.min_acc[LossVariant::kLab]) +
                                 "], FULL " + fmt(full) + " [" + join(a.min_acc[LossVariant::kFull]) +
                                 "], gain " + fmt(full - lab) + " (need >= 2.0)"};
}

Verdict zero_cost_vs_validation(const fs::path& work) {
  Ablation& a = ablation(work);
  const std::array<double, 3> fractions{0.25, 0.5, 0.75};
  std::array<std::vector<double>, 3> last, val;
  for (std::size_t s = 0; s < a.full_runs.size(); ++s) {
    RunOutcome& run = a.full_runs[s];
    Supernet& net = *run.net;
    const CostFn cost = make_cost(Metric::kFlops, net);
    const double lo = cost(anchor(net.space(), Anchor::kMin)), hi = cost(anchor(net.space(), Anchor::kMax));
    std::vector<double> budgets;
    for (double f : fractions) budgets.push_back(lo + f * (hi - lo));
    const int k = run_config(LossVariant::kFull, s + 1, kIters).bn_recalib_batches;
    Rng pick = make_stream(s + 1, 0x5e1);
    const auto vs = select_by_validation(net, val_set(), run.result.norm, run.result.calibration, k, cost, budgets,
                                         50, pick);
    for (std::size_t b = 0; b < budgets.size(); ++b) {
      double acc_last = 0.0, acc_val = 0.0;
      try {
        const Selected sel =
            select_fixed(run.result.ledger, net.space(), cost, budgets[b], SelectionRule::kLastSampled);
        acc_last = 100.0 * evaluate_subnet(net, sel.config, test_set(), run.result.norm, run.result.calibration, k);
      } catch (const InfeasibleBudget&) {
      }
      if (vs.selected[b]) {
        acc_val = 100.0 * evaluate_subnet(net, vs.selected[b]->config, test_set(), run.result.norm,
                                          run.result.calibration, k);
      }
      last[b].push_back(acc_last);
      val[b].push_back(acc_val);
    }
  }
  bool ok = !a.full_runs.empty();
  std::string detail;
  for (std::size_t b = 0; b < fractions.size(); ++b) {
    const double ml = median(last[b]), mv = median(val[b]);
    ok = ok && ml >= mv - 1.0;
    detail += (detail.empty() ? "" : "; ") + std::string("rung ") + fmt(fractions[b], 2) + ": last_sampled " +
              fmt(ml) + " vs validation " + fmt(mv);
  }
  return {ok, detail + " (median over " + std::to_string(a.full_runs.size()) + " seeds, 50 candidates)"};
}

Verdict pretrain_speedup(const fs::path& work) {
  const Pretrained& pre = pretrained(work);
  std::vector<double> random_final, init_half;
  const auto t0 = Clock::now();
  for (int seed = 1; seed <= kSeeds; ++seed) {
    const Task task = make_task(static_cast<std::uint64_t>(seed));
    const auto u = static_cast<std::uint64_t>(seed);
    random_final.push_back(run_once(task, LossVariant::kFull, u, kIters, std::nullopt, false).max_acc);
    init_half.push_back(run_once(task, LossVariant::kFull, u, kIters / 2, pre.checkpoint, false).max_acc);
    std::cout << "  seed " << seed << ": random init " << kIters << " iters " << fmt(random_final.back(), 1)
              << ", pretrained init " << kIters / 2 << " iters " << fmt(init_half.back(), 1) << std::endl;
  }
  const double mr = median(random_final), mi = median(init_half);
  return {mi >= mr, "median maxnet: random init after " + std::to_string(kIters) + " iters " + fmt(mr) +
                        " [" + join(random_final) + "], pretrained init after " + std::to_string(kIters / 2) +
                        " iters " + fmt(mi) + " [" + join(init_half) + "] (" + fmt(seconds_since(t0) / 60.0, 1) +
                        " min)"};
}

// ---------------------------------------------------------------------------
// 13. Determinism

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Verdict determinism(const fs::path& work) {
  auto [labeled, unlabeled] = split_labeled(oracle::tiny_dataset(96, 4, 16, 1013), 4, 3);
  TrainConfig cfg = run_config(LossVariant::kFull, 13, 30);
  cfg.batch_l = cfg.batch_u = 8;
  cfg.eval_interval = 10;
  cfg.bn_recalib_batches = 2;
  std::array<std::string, 2> ledger, log, ckpt;
  std::vector<std::vector<float>> ballast;
  for (int k = 0; k < 2; ++k) {
    // Shift the heap between runs so buffer addresses differ.
    ballast.emplace_back(static_cast<std::size_t>(1 + 37 * k), 1.0f);
    Supernet net = desk_net(1013);
    TrainOptions opt;
    opt.eval_data = &labeled;
    opt.run_dir = work / ("det_" + std::to_string(k));
    fs::remove_all(*opt.run_dir);
    const TrainResult r = train(net, labeled, unlabeled, cfg, opt);
    ledger[static_cast<std::size_t>(k)] = r.ledger.to_text() + r.ledger.log_text();
    log[static_cast<std::size_t>(k)] = r.log.to_text();
    ckpt[static_cast<std::size_t>(k)] = file_bytes(*opt.run_dir / "supernet.ckpt");
  }
  const bool same_ledger = ledger[0] == ledger[1], same_log = log[0] == log[1], same_ckpt = ckpt[0] == ckpt[1];
  return {same_ledger && same_log && same_ckpt && !ckpt[0].empty(),
          std::string("two seeded runs: ledger ") + (same_ledger ? "identical" : "differs") + ", loss trace " +
              (same_log ? "identical" : "differs") + ", checkpoint " + (same_ckpt ? "identical" : "differs")};
}

// ---------------------------------------------------------------------------
// 14. Round-trips

Verdict round_trips(const fs::path& work) {
  Supernet net = desk_net(1014);
  Rng rng = make_stream(1014, 1);
  scramble_bn(net, rng);
  const fs::path p = work / "roundtrip.ckpt";
  save_checkpoint(net, p, 5);
  const Supernet back = load_checkpoint(p);
  bool ckpt_ok = true;
  const auto a = net.state(), b = back.state();
  ckpt_ok = a.size() == b.size();
  for (std::size_t i = 0; ckpt_ok && i < a.size(); ++i) {
    const auto x = a[i].tensor.data(), y = b[i].tensor.data();
    ckpt_ok = a[i].name == b[i].name && x.size() == y.size() && std::equal(x.begin(), x.end(), y.begin());
  }
  const StandaloneNet m = materialize(net, sample_uniform(net.space(), rng));
  save_standalone(m, net.space(), work / "standalone.ckpt");
  const LoadedStandalone ls = load_standalone(work / "standalone.ckpt");
  const Tensor x = oracle::random_tensor({2, 3, m.resolution(), m.resolution()}, rng);
  ckpt_ok = ckpt_ok && oracle::max_abs_diff(m.forward(x).data(), ls.net.forward(x).data()) == 0.0;

  const Dataset ds = make_synthetic({4, 16, 64, 1014});
  const Dataset dt = decode_tds(encode_tds(ds));
  write_dataset(ds, work / "roundtrip.tds");
  const Dataset df = read_dataset(work / "roundtrip.tds");
  const bool tds_ok = dt.pixels == ds.pixels && dt.labels == ds.labels && dt.height == ds.height &&
                      dt.channels == ds.channels && dt.num_classes == ds.num_classes && df.pixels == ds.pixels &&
                      df.labels == ds.labels;

  int config_ok = 0;
  for (const char* profile : {"desk-small", "mbv3-large7"}) {
    const SearchSpace s = bundled_profile(profile);
    for (int i = 0; i < 500; ++i) {
      const auto c = sample_uniform(s, rng);
      const std::string key = encode(c);
      config_ok += decode(s, key) == c && encode(decode(s, key)) == key;
    }
  }
  return {ckpt_ok && tds_ok && config_ok == 1000,
          std::string("checkpoint ") + (ckpt_ok ? "bit-exact" : "differs") + ", TDS " + (tds_ok ? "exact" : "differs") +
              ", config encode/decode " + std::to_string(config_ok) + "/1000"};
}

}  // namespace

int main(int argc, char** argv) {
  configure_allocator();
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  std::string work_dir = (fs::temp_directory_path() / "tofa_acceptance").string();
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',')->check(CLI::Range(1, 14));
  app.add_option("--work-dir", work_dir, "scratch directory");
  CLI11_PARSE(app, argc, argv);
  const fs::path work(work_dir);
  fs::create_directories(work);

  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"gradient checks", gradient_checks},
      {"convolution oracle", conv_oracle},
      {"weight-sharing equivalence", weight_sharing},
      {"gradient locality", gradient_locality},
      {"analytic flops", flops_model},
      {"sampler uniformity and sandwich", sampler_and_sandwich},
      {"ledger and zero-cost selection", ledger_and_selection},
      {"pseudo-label masking", fixmatch_masking},
      {"semi-supervised gain (maxnet)", [&] { return ssl_ablation_maxnet(work); }},
      {"semi-supervised gain (minnet)", [&] { return ssl_ablation_minnet(work); }},
      {"last_sampled vs validation selection", [&] { return zero_cost_vs_validation(work); }},
      {"pretrained initialization speedup", [&] { return pretrain_speedup(work); }},
      {"determinism", [&] { return determinism(work); }},
      {"round-trips", [&] { return round_trips(work); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failed += !v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << id << " " << criteria[i].first << ": " << v.detail
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}

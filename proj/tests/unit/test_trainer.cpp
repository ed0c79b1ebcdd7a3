// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "oracles.hpp"
#include "tofa/error.hpp"
#include "tofa/optim.hpp"
#include "tofa/trainer.hpp"

using namespace tofa;
namespace fs = std::filesystem;

namespace {

TrainConfig small_config(LossVariant v, long iters, std::uint64_t seed = 1) {
  TrainConfig cfg;
  cfg.max_iters = iters;
  cfg.variant = v;
  cfg.seed = seed;
  cfg.batch_l = 4;
  cfg.batch_u = 4;
  cfg.bn_recalib_batches = 1;
  return cfg;
}

struct Fixture {
  Dataset labeled, unlabeled;
  Fixture() {
    auto [l, u] = split_labeled(oracle::tiny_dataset(120, 4, 16, 3), 3, 1);
    labeled = std::move(l);
    unlabeled = std::move(u);
  }
};

Supernet fresh_net(std::uint64_t seed) {
  Rng rng = make_stream(seed, 0x77);
  return Supernet(bundled_profile("desk-small"), 4, rng);
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("tofa_trainer_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(Config, DefaultsAreValid) {
  const TrainConfig cfg;
  EXPECT_NO_THROW(validate_config(cfg));
  EXPECT_EQ(cfg.max_iters, 10000);
  EXPECT_DOUBLE_EQ(cfg.base_lr, 0.01);
  EXPECT_FLOAT_EQ(cfg.tau, 0.95f);
  EXPECT_FLOAT_EQ(cfg.label_smoothing, 0.1f);
  EXPECT_EQ(cfg.batch_l, 32);
}

TEST(Config, OutOfRangeFieldsAreRejected) {
  auto bad = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    EXPECT_THROW(validate_config(c), ConfigError);
  };
  bad([](TrainConfig& c) { c.tau = 1.0f; });
  bad([](TrainConfig& c) { c.tau = 0.0f; });
  bad([](TrainConfig& c) { c.momentum = 1.0f; });
  bad([](TrainConfig& c) { c.batch_u = 1; });
  bad([](TrainConfig& c) { c.base_lr = std::nan(""); });
  bad([](TrainConfig& c) { c.label_smoothing = -0.1f; });
  bad([](TrainConfig& c) { c.mu = 0; });
}

TEST(Config, KeyValueRoundTripAndPrecedence) {
  TrainConfig cfg;
  cfg.tau = 0.8f;
  cfg.variant = LossVariant::kLabDist;
  cfg.seed = 12345678901234ull;
  const auto kv = to_key_values(cfg);
  const auto text = format_key_values(kv);
  const TrainConfig back = apply_key_values(TrainConfig{}, parse_key_values(text));
  EXPECT_EQ(to_key_values(back), kv);
  // Later maps override earlier ones field by field.
  const TrainConfig over = apply_key_values(back, {{"tau", "0.5"}, {"variant", "full"}});
  EXPECT_FLOAT_EQ(over.tau, 0.5f);
  EXPECT_EQ(over.variant, LossVariant::kFull);
  EXPECT_EQ(over.seed, cfg.seed);
  EXPECT_THROW(apply_key_values(cfg, {{"learning_rate", "1"}}), ConfigError);
  EXPECT_THROW(apply_key_values(cfg, {{"tau", "high"}}), ConfigError);
}

TEST(Config, ParseKeyValuesReportsLines) {
  const auto kv = parse_key_values("# comment\n\nmax_iters = 5\n  tau=0.9  \n");
  EXPECT_EQ(kv.at("max_iters"), "5");
  EXPECT_EQ(kv.at("tau"), "0.9");
  try {
    parse_key_values("max_iters = 5\nnonsense\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2);
  }
}

TEST(Schedule, WarmupThenHalfCosine) {
  const long total = 100, warm = 10;
  const double base = 0.01;
  for (long i = 0; i < total; ++i) {
    double want;
    if (i < warm) {
      want = base * (i + 1) / warm;
    } else {
      want = base * 0.5 * (1.0 + std::cos(M_PI * (i - warm) / static_cast<double>(total - 1 - warm)));
    }
    EXPECT_NEAR(cosine_warmup_lr(i, total, warm, base), want, 1e-15) << i;
  }
  EXPECT_DOUBLE_EQ(cosine_warmup_lr(warm - 1, total, warm, base), base);
  EXPECT_NEAR(cosine_warmup_lr(total - 1, total, warm, base), 0.0, 1e-18);
  EXPECT_EQ(warmup_iters(small_config(LossVariant::kLab, 100), 10), 5 * 3);
  EXPECT_EQ(warmup_iters(small_config(LossVariant::kLab, 8), 10), 7);
}

TEST(Optimizer, MomentumAndDecayMatchHandUpdate) {
  Tensor w({2}, {1.0f, -2.0f}, true);
  Tensor b({1}, {0.5f}, true);
  Sgd opt({{"layer.weight", w}, {"layer.bias", b}}, 0.9f, 0.1f);
  double vw = 0.0, vb = 0.0, xw = 1.0, xb = 0.5;
  for (int step = 0; step < 3; ++step) {
    opt.zero_grad();
    w.grad()[0] = 0.5f;
    w.grad()[1] = 0.0f;
    b.grad()[0] = 1.0f;
    opt.step(0.1f);
    vw = 0.9 * vw + 0.5 + 0.1 * xw;
    xw -= 0.1 * vw;
    vb = 0.9 * vb + 1.0;  // bias is not decayed
    xb -= 0.1 * vb;
  }
  EXPECT_NEAR(w.data()[0], xw, 1e-6);
  EXPECT_NEAR(b.data()[0], xb, 1e-6);
  EXPECT_TRUE(is_decay_exempt("x.bn.bias"));
  EXPECT_FALSE(is_decay_exempt("x.bn.weight"));
  w.grad()[0] = std::nanf("");
  EXPECT_THROW(opt.step(0.1f), NumericError);
}

TEST(Ledger, RecordAndUpdateSemantics) {
  SampleLedger l("MIN", "MAX");
  const SearchSpace s = bundled_profile("desk-small");
  Rng rng = make_stream(1, 1);
  const auto a = sample_uniform(s, rng);
  const auto mx = anchor(s, Anchor::kMax);
  l.update({a, a}, mx, 1);  // duplicates within one step count once
  l.update({a}, mx, 2);
  EXPECT_EQ(l.index(encode(a)), 3);
  EXPECT_EQ(l.entries().at(encode(a)).count, 2);
  EXPECT_EQ(l.entries().at(encode(a)).first, 1);
  EXPECT_EQ(l.entries().at(encode(a)).last, 2);
  EXPECT_EQ(l.index(encode(mx)), 3);
  EXPECT_EQ(l.index("never-sampled"), 0);
  l.record("MIN", 4);
  EXPECT_TRUE(l.is_anchor("MIN"));
  EXPECT_FALSE(l.is_anchor(encode(a)));
}

TEST(Ledger, TextRoundTripAndReplay) {
  SampleLedger l("m", "M");
  Rng rng = make_stream(2, 2);
  for (long t = 1; t <= 50; ++t) {
    l.record("m", t);
    l.record("k" + std::to_string(uniform_index(rng, 7)), t);
  }
  const SampleLedger back = SampleLedger::from_text(l.to_text(), l.log_text());
  EXPECT_TRUE(back == l);
  EXPECT_TRUE(SampleLedger::replay(l.log(), "m", "M") == l);
  EXPECT_EQ(l.index("m"), 50 * 51 / 2);
  std::string table = l.to_text();
  table.replace(table.find("\t1275\t"), 6, "\t1274\t");
  EXPECT_THROW(SampleLedger::from_text(table, l.log_text()), FormatError);
}

TEST(TrainStep, SandwichComposition) {
  Fixture fx;
  Supernet net = fresh_net(3);
  Sgd opt(net.parameters(), 0.9f, 1e-5f);
  const TrainConfig cfg = small_config(LossVariant::kFull, 10);
  const Normalization norm = compute_normalization(fx.labeled);
  Rng aug = make_stream(3, 3), arch = make_stream(3, 4), noise = make_stream(3, 5);
  const auto mx = anchor(net.space(), Anchor::kMax), mn = anchor(net.space(), Anchor::kMin);
  std::vector<int> li{0, 1, 2, 3}, ui{0, 1, 2, 3};
  StepBatches b{make_labeled_batch(fx.labeled, li, aug, mx.resolution, norm),
                make_unlabeled_batch(fx.unlabeled, ui, aug, mx.resolution, norm)};
  for (int i = 0; i < 3; ++i) {
    const StepOutcome out = train_step(net, opt, b, cfg, 0.01, arch, noise);
    ASSERT_EQ(out.trained.size(), 4u);
    EXPECT_EQ(out.trained[0], mx);
    EXPECT_EQ(out.trained[1], out.r1);
    EXPECT_EQ(out.trained[2], out.r2);
    EXPECT_EQ(out.trained[3], mn);
    EXPECT_EQ(out.report.distill_terms.size(), 3u);
    EXPECT_TRUE(std::isfinite(out.report.total));
  }
}

TEST(TrainStep, LabeledOnlyVariantIgnoresUnlabeledBatch) {
  Fixture fx;
  const Normalization norm = compute_normalization(fx.labeled);
  const auto mx = anchor(bundled_profile("desk-small"), Anchor::kMax);
  std::vector<int> li{0, 1, 2, 3};
  double totals[2];
  for (int k = 0; k < 2; ++k) {
    Supernet net = fresh_net(4);
    Sgd opt(net.parameters(), 0.9f, 1e-5f);
    Rng aug = make_stream(4, 3), arch = make_stream(4, 4), noise = make_stream(4, 5);
    StepBatches b{make_labeled_batch(fx.labeled, li, aug, mx.resolution, norm), std::nullopt};
    if (k == 1) b.unlabeled = make_unlabeled_batch(fx.unlabeled, li, aug, mx.resolution, norm);
    const auto out = train_step(net, opt, b, small_config(LossVariant::kLab, 10), 0.01, arch, noise);
    EXPECT_EQ(out.report.fm_term, 0.0);
    EXPECT_EQ(out.report.distill_unlabeled, 0.0);
    totals[k] = out.report.total;
  }
  EXPECT_EQ(totals[0], totals[1]);
}

TEST(Train, MinnetIndexIsTriangularAndRunsAreDeterministic) {
  Fixture fx;
  const long T = 8;
  SampleLedger ledgers[2];
  std::string logs[2];
  for (int k = 0; k < 2; ++k) {
    Supernet net = fresh_net(5);
    const auto r = train(net, fx.labeled, fx.unlabeled, small_config(LossVariant::kFull, T));
    ledgers[k] = r.ledger;
    logs[k] = r.log.to_text();
    EXPECT_EQ(r.ledger.index(r.ledger.min_key()), T * (T + 1) / 2);
    EXPECT_EQ(r.ledger.index(r.ledger.max_key()), T * (T + 1) / 2);
    EXPECT_EQ(r.log.iters.size(), static_cast<std::size_t>(T));
  }
  EXPECT_TRUE(ledgers[0] == ledgers[1]);
  EXPECT_EQ(logs[0], logs[1]);
}

TEST(Train, EmptyUnlabeledSetBehavesAsLabeledOnly) {
  Fixture fx;
  Supernet net = fresh_net(6);
  const auto r = train(net, fx.labeled, Dataset{}, small_config(LossVariant::kFull, 3));
  for (const auto& it : r.log.iters) {
    EXPECT_EQ(it.fm, 0.0);
    EXPECT_EQ(it.distill_unlabeled, 0.0);
  }
}

TEST(Train, RejectsMismatchedData) {
  Fixture fx;
  Supernet net = fresh_net(7);
  Dataset wrong = oracle::tiny_dataset(12, 3, 16, 2);
  EXPECT_THROW(train(net, wrong, fx.unlabeled, small_config(LossVariant::kLab, 2)), ContractError);
  Dataset gray = oracle::tiny_dataset(12, 4, 16, 2);
  gray.channels = 1;
  gray.pixels.resize(gray.pixels.size() / 3);
  EXPECT_THROW(train(net, gray, fx.unlabeled, small_config(LossVariant::kLab, 2)), DimensionError);
}

TEST(Train, DivergenceRestoresAndThrows) {
  Fixture fx;
  Supernet net = fresh_net(8);
  TrainConfig cfg = small_config(LossVariant::kLab, 40);
  cfg.base_lr = 1e12;
  cfg.warmup_epochs = 0;
  const auto before = net.parameters();
  std::vector<float> first(before[0].tensor.data().begin(), before[0].tensor.data().end());
  EXPECT_THROW(train(net, fx.labeled, Dataset{}, cfg), DivergenceError);
  for (const auto& p : net.parameters()) EXPECT_TRUE(all_finite(p.tensor.data())) << p.name;
  // The last snapshot is the initial state.
  EXPECT_EQ(std::vector<float>(net.parameters()[0].tensor.data().begin(),
                               net.parameters()[0].tensor.data().end()),
            first);
}

TEST(Train, RunDirectoryRoundTrips) {
  Fixture fx;
  Supernet net = fresh_net(9);
  const fs::path dir = temp_dir("run");
  TrainOptions o;
  o.run_dir = dir;
  o.eval_data = &fx.labeled;
  TrainConfig cfg = small_config(LossVariant::kFull, 4);
  cfg.eval_interval = 2;
  const auto r = train(net, fx.labeled, fx.unlabeled, cfg, o);
  EXPECT_EQ(r.log.evals.size(), 2u);
  for (const char* f : {"config.txt", "supernet.ckpt", "ledger.txt", "ledger_log.txt", "train_log.txt",
                        "calib.tds", "iter_2.ckpt", "iter_4.ckpt"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  LoadedRun run = load_run(dir);
  EXPECT_TRUE(run.ledger == r.ledger);
  EXPECT_EQ(to_key_values(run.cfg), to_key_values(cfg));
  EXPECT_EQ(run.norm.mean, r.norm.mean);
  EXPECT_EQ(run.calibration.pool().pixels, r.calibration.pool().pixels);
  const auto a = net.state(), b = run.net.state();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(oracle::max_abs_diff(a[i].tensor.data(), b[i].tensor.data()), 0.0) << a[i].name;
  }
}

TEST(Pretrain, WritesLoadableCheckpoint) {
  Fixture fx;
  Supernet net = fresh_net(10);
  const fs::path dir = temp_dir("pre");
  fs::create_directories(dir);
  TrainConfig cfg = small_config(LossVariant::kFull, 3);
  pretrain(net, fx.labeled, cfg, dir / "pre.ckpt");
  EXPECT_TRUE(fs::exists(dir / "pre.ckpt"));
}

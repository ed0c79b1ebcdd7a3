// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "tofa/error.hpp"
#include "tofa/ops.hpp"

using namespace tofa;
using oracle::grad_check;
using oracle::random_tensor;

namespace {

constexpr double kTol = 1e-3;

// Keeps inputs away from the kinks of relu / hardswish.
Tensor away_from_kinks(Shape shape, Rng& rng) {
  Tensor t(std::move(shape), true);
  for (auto& v : t.data()) {
    double x = normal(rng) * 2.0;
    for (double k : {-3.0, 0.0, 3.0}) {
      if (std::abs(x - k) < 0.05) x = k + 0.1;
    }
    v = static_cast<float>(x);
  }
  return t;
}

}  // namespace

TEST(Tensor, ShapeAndFill) {
  Tensor t = Tensor::filled({2, 3}, 1.5f);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(shape_str(t.shape()), "[2, 3]");
  for (float v : t.data()) EXPECT_EQ(v, 1.5f);
  EXPECT_EQ(Tensor::scalar(4.0f).item(), 4.0f);
}

TEST(Tensor, ShallowCopySharesStorage) {
  Tensor a({3});
  Tensor b = a;
  b.data()[1] = 7.0f;
  EXPECT_EQ(a.data()[1], 7.0f);
  Tensor c = a.detach();
  c.data()[1] = 1.0f;
  EXPECT_EQ(a.data()[1], 7.0f);
}

TEST(Tensor, BackwardAccumulatesThroughSharedInput) {
  Tensor x({2}, {1.0f, 2.0f}, true);
  // y = sum(x*x + x)  ->  dy/dx = 2x + 1
  Tensor y = ops::sum(ops::add(ops::mul(x, x), x));
  y.backward();
  EXPECT_FLOAT_EQ(x.grad()[0], 3.0f);
  EXPECT_FLOAT_EQ(x.grad()[1], 5.0f);
}

TEST(Tensor, NoGradGuardSkipsGraph) {
  Tensor x({2}, {1.0f, 2.0f}, true);
  Tensor y;
  {
    NoGradGuard g;
    y = ops::sum(ops::mul(x, x));
  }
  EXPECT_TRUE(y.is_leaf());
  EXPECT_TRUE(GradMode::enabled());
}

TEST(Tensor, BackwardRequiresScalar) {
  Tensor x({2}, {1.0f, 2.0f}, true);
  Tensor y = ops::scale(x, 2.0f);
  EXPECT_THROW(y.backward(), Error);
}

TEST(Tensor, AllFinite) {
  std::vector<float> v{1.0f, 2.0f};
  EXPECT_TRUE(all_finite(v));
  v.push_back(std::nanf(""));
  EXPECT_FALSE(all_finite(v));
}

TEST(Ops, ElementwiseValues) {
  Tensor x({4}, {-4.0f, -1.0f, 1.0f, 4.0f});
  const Tensor rt = ops::relu(x), ht = ops::hardswish(x), st = ops::sigmoid(x);
  auto r = rt.data();
  EXPECT_EQ(r[0], 0.0f);
  EXPECT_EQ(r[3], 4.0f);
  auto h = ht.data();
  EXPECT_FLOAT_EQ(h[0], 0.0f);
  EXPECT_FLOAT_EQ(h[1], -1.0f * 2.0f / 6.0f);
  EXPECT_FLOAT_EQ(h[2], 1.0f * 4.0f / 6.0f);
  EXPECT_FLOAT_EQ(h[3], 4.0f);
  auto s = st.data();
  EXPECT_NEAR(s[2], 1.0 / (1.0 + std::exp(-1.0)), 1e-6);
}

TEST(Ops, MismatchedShapesThrow) {
  EXPECT_THROW(ops::add(Tensor({2}), Tensor({3})), DimensionError);
}

TEST(Ops, GlobalAvgPoolAndPad) {
  Tensor x({1, 1, 2, 2}, {1.0f, 2.0f, 3.0f, 6.0f});
  EXPECT_FLOAT_EQ(ops::global_avg_pool(x).data()[0], 3.0f);
  Tensor p = ops::pad2d(x, 1);
  EXPECT_EQ(p.shape(), (Shape{1, 1, 4, 4}));
  EXPECT_EQ(p.data()[5], 1.0f);
  EXPECT_EQ(p.data()[0], 0.0f);
}

TEST(Ops, SoftmaxRowsSumToOne) {
  Rng rng = make_stream(1, 1);
  Tensor l = random_tensor({5, 7}, rng, 3.0f);
  Tensor p = ops::softmax(l);
  for (int r = 0; r < 5; ++r) {
    double s = 0.0;
    for (int c = 0; c < 7; ++c) s += p.data()[static_cast<std::size_t>(r * 7 + c)];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Ops, SoftCrossEntropyZeroWeightRowsAreExactlyZero) {
  Rng rng = make_stream(2, 1);
  Tensor l = random_tensor({3, 4}, rng, 1.0f, true);
  Tensor t = ops::softmax(random_tensor({3, 4}, rng));
  std::vector<float> w{0.0f, 1.0f, 0.0f};
  Tensor loss = ops::soft_cross_entropy(l, t, w);
  loss.backward();
  for (int c = 0; c < 4; ++c) {
    EXPECT_EQ(l.grad()[static_cast<std::size_t>(c)], 0.0f);
    EXPECT_EQ(l.grad()[static_cast<std::size_t>(8 + c)], 0.0f);
  }
}

TEST(Ops, DropoutEvalIsIdentityAndTrainPreservesMean) {
  Rng rng = make_stream(3, 1);
  Tensor x = Tensor::filled({20000}, 1.0f);
  Tensor e = ops::dropout(x, 0.3f, rng, ops::Mode::kEval);
  EXPECT_EQ(e.data()[0], 1.0f);
  Tensor d = ops::dropout(x, 0.3f, rng, ops::Mode::kTrain);
  double s = 0.0;
  int zeros = 0;
  for (float v : d.data()) {
    s += v;
    zeros += v == 0.0f;
  }
  EXPECT_NEAR(s / 20000.0, 1.0, 0.03);
  EXPECT_NEAR(zeros / 20000.0, 0.3, 0.02);
}

TEST(Ops, DropConnectDropsWholeSamples) {
  Rng rng = make_stream(4, 1);
  Tensor x = Tensor::filled({64, 2, 3, 3}, 1.0f);
  Tensor d = ops::drop_connect(x, 0.5f, rng, ops::Mode::kTrain);
  for (int n = 0; n < 64; ++n) {
    const float first = d.data()[static_cast<std::size_t>(n * 18)];
    for (int i = 1; i < 18; ++i) EXPECT_EQ(d.data()[static_cast<std::size_t>(n * 18 + i)], first);
  }
}

TEST(Ops, BatchNormTrainModeNormalizesAndTracksRunningStats) {
  Rng rng = make_stream(5, 1);
  Tensor x = random_tensor({4, 3, 5, 5}, rng, 2.0f);
  for (auto& v : x.data()) v += 1.0f;
  Tensor g = Tensor::filled({3}, 1.0f), b({3});
  Tensor rm({3}), rv = Tensor::filled({3}, 1.0f);
  ops::BatchNormOptions o;
  Tensor y = ops::batchnorm2d(x, g, b, rm, rv, o);
  for (int c = 0; c < 3; ++c) {
    double s = 0.0, s2 = 0.0, xs = 0.0;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 25; ++i) {
        const auto idx = static_cast<std::size_t>((n * 3 + c) * 25 + i);
        s += y.data()[idx];
        s2 += static_cast<double>(y.data()[idx]) * y.data()[idx];
        xs += x.data()[idx];
      }
    EXPECT_NEAR(s / 100.0, 0.0, 1e-5);
    EXPECT_NEAR(s2 / 100.0, 1.0, 1e-3);
    EXPECT_NEAR(rm.data()[static_cast<std::size_t>(c)], 0.1 * xs / 100.0, 1e-5);
  }
}

TEST(Ops, BatchNormUsesLeadingChannelsOfLargerParameters) {
  Rng rng = make_stream(6, 1);
  Tensor x = random_tensor({2, 2, 3, 3}, rng);
  Tensor g({4}, {2.0f, 3.0f, 9.0f, 9.0f}), b({4}, {0.5f, -0.5f, 9.0f, 9.0f});
  Tensor rm({4}, {0.1f, 0.2f, 0.3f, 0.4f}), rv({4}, {1.0f, 2.0f, 3.0f, 4.0f});
  ops::BatchNormOptions o;
  o.mode = ops::Mode::kEval;
  Tensor y = ops::batchnorm2d(x, g, b, rm, rv, o);
  const double expect = 3.0 * (x.data()[9] - 0.2) / std::sqrt(2.0 + 1e-5) - 0.5;
  EXPECT_NEAR(y.data()[9], expect, 1e-5);
}

// Finite-difference checks, five random shapes per primitive.

TEST(GradCheck, Elementwise) {
  Rng rng = make_stream(10, 1);
  for (int trial = 0; trial < 5; ++trial) {
    const Shape s{1 + trial, 2 + trial % 3, 3};
    auto a = away_from_kinks(s, rng);
    auto b = away_from_kinks(s, rng);
    EXPECT_LT(grad_check([](auto& in) { return ops::add(in[0], in[1]); }, {a, b}, rng).worst_rel_err, kTol);
    EXPECT_LT(grad_check([](auto& in) { return ops::mul(in[0], in[1]); }, {a, b}, rng).worst_rel_err, kTol);
    EXPECT_LT(grad_check([](auto& in) { return ops::scale(in[0], -1.7f); }, {a}, rng).worst_rel_err, kTol);
    EXPECT_LT(grad_check([](auto& in) { return ops::relu(in[0]); }, {a}, rng).worst_rel_err, kTol);
    EXPECT_LT(grad_check([](auto& in) { return ops::hardswish(in[0]); }, {a}, rng).worst_rel_err, kTol);
    EXPECT_LT(grad_check([](auto& in) { return ops::sigmoid(in[0]); }, {a}, rng).worst_rel_err, kTol);
    EXPECT_LT(grad_check([](auto& in) { return ops::sum(in[0]); }, {a}, rng).worst_rel_err, kTol);
    EXPECT_LT(grad_check([](auto& in) { return ops::mean(in[0]); }, {a}, rng).worst_rel_err, kTol);
  }
}

TEST(GradCheck, PoolingPaddingAndGating) {
  Rng rng = make_stream(11, 1);
  for (int trial = 0; trial < 5; ++trial) {
    const int n = 1 + trial % 2, c = 2 + trial, h = 3 + trial % 3;
    auto x = random_tensor({n, c, h, h}, rng, 1.0f, true);
    auto gate = random_tensor({n, c}, rng, 1.0f, true);
    EXPECT_LT(grad_check([](auto& in) { return ops::global_avg_pool(in[0]); }, {x}, rng).worst_rel_err, kTol);
    EXPECT_LT(grad_check([](auto& in) { return ops::pad2d(in[0], 2); }, {x}, rng).worst_rel_err, kTol);
    EXPECT_LT(grad_check([](auto& in) { return ops::mul_channel(in[0], in[1]); }, {x, gate}, rng).worst_rel_err,
              kTol);
  }
}

TEST(GradCheck, Conv2dDenseAndDepthwise) {
  Rng rng = make_stream(12, 1);
  for (int trial = 0; trial < 5; ++trial) {
    const int cin = 2 + trial % 3, h = 5 + trial % 3, k = trial % 2 ? 5 : 3, stride = 1 + trial % 2;
    auto x = random_tensor({2, cin, h, h}, rng, 1.0f, true);
    auto w = random_tensor({4, cin, k, k}, rng, 0.5f, true);
    auto bias = random_tensor({4}, rng, 0.5f, true);
    ops::Conv2dOptions o{stride, k / 2, 1, 3, k == 5 ? 3 : -1};
    EXPECT_LT(grad_check([o](auto& in) { return ops::conv2d(in[0], in[1], &in[2], o); }, {x, w, bias}, rng)
                  .worst_rel_err,
              kTol);
    auto wd = random_tensor({cin + 1, 1, k, k}, rng, 0.5f, true);
    ops::Conv2dOptions od{stride, k / 2, cin, cin, -1};
    EXPECT_LT(grad_check([od](auto& in) { return ops::conv2d(in[0], in[1], nullptr, od); }, {x, wd}, rng)
                  .worst_rel_err,
              kTol);
  }
}

TEST(GradCheck, Linear) {
  Rng rng = make_stream(13, 1);
  for (int trial = 0; trial < 5; ++trial) {
    const int in = 3 + trial, out = 2 + trial;
    auto x = random_tensor({1 + trial, in}, rng, 1.0f, true);
    auto w = random_tensor({out + 2, in}, rng, 0.5f, true);
    auto b = random_tensor({out + 2}, rng, 0.5f, true);
    EXPECT_LT(grad_check([out](auto& in) { return ops::linear(in[0], in[1], &in[2], out); }, {x, w, b}, rng)
                  .worst_rel_err,
              kTol);
  }
}

TEST(GradCheck, BatchNormTrainMode) {
  Rng rng = make_stream(14, 1);
  for (int trial = 0; trial < 5; ++trial) {
    const int c = 2 + trial % 3;
    auto x = random_tensor({2 + trial % 2, c, 3, 3}, rng, 1.0f, true);
    auto g = random_tensor({c + 1}, rng, 0.5f, true);
    auto b = random_tensor({c + 1}, rng, 0.5f, true);
    auto f = [c](auto& in) {
      Tensor rm({c + 1}), rv = Tensor::filled({c + 1}, 1.0f);
      ops::BatchNormOptions o;
      o.update_running = false;
      return ops::batchnorm2d(in[0], in[1], in[2], rm, rv, o);
    };
    EXPECT_LT(grad_check(f, {x, g, b}, rng).worst_rel_err, kTol);
  }
}

TEST(GradCheck, SoftCrossEntropy) {
  Rng rng = make_stream(15, 1);
  for (int trial = 0; trial < 5; ++trial) {
    auto l = random_tensor({2 + trial, 3 + trial % 3}, rng, 2.0f, true);
    Tensor t = ops::softmax(random_tensor(l.shape(), rng));
    EXPECT_LT(grad_check([t](auto& in) { return ops::soft_cross_entropy(in[0], t); }, {l}, rng).worst_rel_err,
              kTol);
  }
}

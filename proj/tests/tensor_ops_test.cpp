#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "nabla/ops.hpp"
#include "test_util.hpp"

using namespace nabla;
using nabla::test::naive_conv2d;
using nabla::test::naive_conv_transpose2d;
using nabla::test::random_tensor;

namespace {

Tensor<double> run_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* b, std::size_t stride,
                        std::size_t pad) {
  Tape<double> tape(false);
  std::optional<Var> bv;
  if (b) bv = tape.leaf(*b);
  return tape.value(conv2d(tape, tape.leaf(x), tape.leaf(w), bv, stride, pad));
}

double inner(const std::vector<double>& a, const std::vector<double>& b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

}  // namespace

TEST(Conv2d, OnesKernelCountsOverlap) {
  Tensor<double> x = Tensor<double>::ones({1, 1, 3, 3});
  Tensor<double> w = Tensor<double>::ones({1, 1, 3, 3});
  auto y = run_conv(x, w, nullptr, 1, 1);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  EXPECT_EQ(y.at(0, 0, 1, 1), 9.0);
  EXPECT_EQ(y.at(0, 0, 0, 0), 4.0);
  EXPECT_EQ(y.at(0, 0, 0, 2), 4.0);
  EXPECT_EQ(y.at(0, 0, 2, 0), 4.0);
  EXPECT_EQ(y.at(0, 0, 2, 2), 4.0);
  EXPECT_EQ(y.at(0, 0, 0, 1), 6.0);
}

TEST(Conv2d, IdentityKernel) {
  std::mt19937_64 rng(1);
  auto x = random_tensor<double>({2, 1, 5, 7}, rng);
  Tensor<double> w({1, 1, 1, 1}, 1.0);
  Tensor<double> b({1, 1, 1, 1}, 0.0);
  auto y = run_conv(x, w, &b, 1, 0);
  EXPECT_EQ(y.vec(), x.vec());
}

TEST(Conv2d, MatchesNaiveOracle) {
  std::mt19937_64 rng(2);
  auto x = random_tensor<double>({2, 3, 8, 8}, rng);
  auto w = random_tensor<double>({4, 3, 3, 3}, rng);
  auto b = random_tensor<double>({1, 4, 1, 1}, rng);
  EXPECT_LE(test::max_rel_diff(run_conv(x, w, &b, 1, 1), naive_conv2d(x, w, &b, 1, 1)), 1e-6);
}

TEST(Conv2d, OracleSweepUpTo2x4x8x8) {
  std::mt19937_64 rng(3);
  for (std::size_t n = 1; n <= 2; ++n)
    for (std::size_t c = 1; c <= 4; ++c)
      for (std::size_t hw : {3u, 4u, 7u, 8u})
        for (std::size_t k : {1u, 3u})
          for (std::size_t stride : {1u, 2u})
            for (std::size_t pad : {0u, 1u}) {
              if (hw + 2 * pad < k) continue;
              auto x = random_tensor<double>({n, c, hw, hw}, rng);
              auto w = random_tensor<double>({2, c, k, k}, rng);
              EXPECT_LE(test::max_rel_diff(run_conv(x, w, nullptr, stride, pad), naive_conv2d(x, w, nullptr, stride, pad)),
                        1e-6)
                  << n << "x" << c << "x" << hw << " k" << k << " s" << stride << " p" << pad;
            }
}

TEST(Conv2d, ChannelMismatchNamesBothShapes) {
  Tensor<double> x({1, 2, 4, 4});
  Tensor<double> w({1, 3, 3, 3});
  try {
    run_conv(x, w, nullptr, 1, 1);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("1x2x4x4"), std::string::npos) << msg;
    EXPECT_NE(msg.find("1x3x3x3"), std::string::npos) << msg;
  }
}

TEST(Conv2d, ZeroSizedOutputRejected) {
  Tensor<double> x({1, 1, 2, 2});
  Tensor<double> w({1, 1, 3, 3});
  EXPECT_THROW(run_conv(x, w, nullptr, 1, 0), ShapeError);
}

TEST(Conv2d, RejectsStrideThree) {
  Tensor<double> x({1, 1, 6, 6});
  Tensor<double> w({1, 1, 3, 3});
  EXPECT_THROW(run_conv(x, w, nullptr, 3, 0), ShapeError);
}

TEST(ConvTranspose2d, OnesKernelExpandsBlocks) {
  Tensor<double> x({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor<double> w = Tensor<double>::ones({1, 1, 2, 2});
  Tape<double> tape(false);
  auto y = tape.value(conv_transpose2d(tape, tape.leaf(x), tape.leaf(w), std::nullopt, 2));
  ASSERT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
  const double expected[4][4] = {{1, 1, 2, 2}, {1, 1, 2, 2}, {3, 3, 4, 4}, {3, 3, 4, 4}};
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(y.at(0, 0, i, j), expected[i][j]);
}

TEST(ConvTranspose2d, ZeroInputGivesBias) {
  Tensor<double> x({2, 3, 3, 3});
  std::mt19937_64 rng(4);
  auto w = random_tensor<double>({3, 2, 2, 2}, rng);
  Tensor<double> b({1, 2, 1, 1}, {0.25, -1.5});
  Tape<double> tape(false);
  auto y = tape.value(conv_transpose2d(tape, tape.leaf(x), tape.leaf(w), tape.leaf(b), 2));
  ASSERT_EQ(y.shape(), (Shape{2, 2, 6, 6}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 36; ++i) {
      EXPECT_EQ(y[(n * 2 + 0) * 36 + i], 0.25);
      EXPECT_EQ(y[(n * 2 + 1) * 36 + i], -1.5);
    }
}

TEST(ConvTranspose2d, DoublingRequiresCompatibleKernel) {
  Tensor<double> x({1, 1, 4, 4});
  Tape<double> tape(false);
  Var xv = tape.leaf(x);
  EXPECT_THROW(conv_transpose2d(tape, xv, tape.leaf(Tensor<double>({1, 1, 3, 3})), std::nullopt, 2), ShapeError);
  EXPECT_THROW(conv_transpose2d(tape, xv, tape.leaf(Tensor<double>({1, 1, 2, 2})), std::nullopt, 1), ShapeError);
  auto y = conv_transpose2d(tape, xv, tape.leaf(Tensor<double>({1, 1, 4, 4})), std::nullopt, 2);
  EXPECT_EQ(tape.shape(y), (Shape{1, 1, 8, 8}));
}

TEST(ConvTranspose2d, MatchesNaiveOracle) {
  std::mt19937_64 rng(5);
  for (std::size_t k : {1u, 2u, 3u, 4u})
    for (std::size_t stride : {1u, 2u})
      for (std::size_t pad = 0; pad < k; ++pad) {
        auto x = random_tensor<double>({2, 3, 5, 4}, rng);
        auto w = random_tensor<double>({3, 2, k, k}, rng);
        auto b = random_tensor<double>({1, 2, 1, 1}, rng);
        if (long(stride * 4 + k) - long(2 * pad) <= 0 || long(stride * 3 + k) - long(2 * pad) <= 0) continue;
        Tape<double> tape(false);
        auto y = tape.value(conv_transpose2d(tape, tape.leaf(x), tape.leaf(w), tape.leaf(b), stride, pad));
        EXPECT_LE(test::max_rel_diff(y, naive_conv_transpose2d(x, w, &b, stride, pad)), 1e-6)
            << "k" << k << " s" << stride << " p" << pad;
      }
}

TEST(ConvTranspose2d, IsAdjointOfConv2d) {
  // <convT(x), v> == <x, conv2d^T-backward(v)> with a shared weight buffer.
  std::mt19937_64 rng(6);
  auto w = random_tensor<double>({3, 2, 2, 2}, rng);  // conv: 2 -> 3; transpose: 3 -> 2
  auto x = random_tensor<double>({2, 3, 4, 4}, rng);
  auto v = random_tensor<double>({2, 2, 8, 8}, rng);
  Tape<double> t1(false);
  auto y = t1.value(conv_transpose2d(t1, t1.leaf(x), t1.leaf(w), std::nullopt, 2));

  Tape<double> t2;
  Var vin = t2.leaf(v, true);
  Var out = conv2d(t2, vin, t2.leaf(w), std::nullopt, 2, 0);
  ASSERT_EQ(t2.shape(out), x.shape());
  Var loss = sum(t2, mul(t2, out, t2.leaf(x)));
  t2.backward(loss);
  const double lhs = inner(y.vec(), v.vec());
  const double rhs = t2.value(loss)[0];
  EXPECT_NEAR(lhs, rhs, 1e-9 * std::max(1.0, std::abs(lhs)));
}

TEST(MaxPool2d, PicksWindowMaximum) {
  Tensor<double> x({1, 1, 2, 2}, {1, 2, 3, 4});
  Tape<double> tape(false);
  EXPECT_EQ(tape.value(maxpool2d(tape, tape.leaf(x)))[0], 4.0);
}

TEST(MaxPool2d, ConstantInputRoutesGradientTopLeft) {
  Tensor<double> x({1, 1, 4, 4}, 2.5);
  Tape<double> tape;
  Var xv = tape.leaf(x, true);
  Var y = maxpool2d(tape, xv);
  for (double v : tape.value(y).data()) EXPECT_EQ(v, 2.5);
  tape.backward(sum(tape, y));
  const auto& g = tape.grad(xv);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(g[i * 4 + j], (i % 2 == 0 && j % 2 == 0) ? 1.0 : 0.0);
}

TEST(MaxPool2d, MatchesWindowScan) {
  std::mt19937_64 rng(7);
  auto x = random_tensor<double>({1, 2, 6, 6}, rng);
  Tape<double> tape(false);
  auto y = tape.value(maxpool2d(tape, tape.leaf(x)));
  ASSERT_EQ(y.shape(), (Shape{1, 2, 3, 3}));
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        double m = -1e300;
        for (std::size_t a = 0; a < 2; ++a)
          for (std::size_t b = 0; b < 2; ++b) m = std::max(m, x.at(0, c, 2 * i + a, 2 * j + b));
        EXPECT_EQ(y.at(0, c, i, j), m);
      }
}

TEST(MaxPool2d, OddExtentRejected) {
  Tape<double> tape(false);
  EXPECT_THROW(maxpool2d(tape, tape.leaf(Tensor<double>({1, 1, 5, 4}))), ShapeError);
}

namespace {

struct BnFixture {
  Tensor<double> gamma, beta, mean, var, tracked;
  explicit BnFixture(std::size_t c)
      : gamma({1, c, 1, 1}, 1.0), beta({1, c, 1, 1}, 0.0), mean({1, c, 1, 1}, 0.0), var({1, c, 1, 1}, 1.0),
        tracked({1, 1, 1, 1}, 0.0) {}
  RunningStats<double> stats() { return {mean, var, tracked}; }
};

}  // namespace

TEST(BatchNorm2d, StandardizedInputIsNearlyUnchanged) {
  // Per-channel mean 0 and variance 1 by construction.
  Tensor<double> x({2, 1, 1, 2}, {1, -1, 1, -1});
  BnFixture bn(1);
  Tape<double> tape(false);
  auto y = tape.value(batchnorm2d(tape, tape.leaf(x), tape.leaf(bn.gamma), tape.leaf(bn.beta), bn.stats(), Mode::Train));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], x[i], 1e-5);
}

TEST(BatchNorm2d, ZeroGammaOutputsBeta) {
  std::mt19937_64 rng(8);
  auto x = random_tensor<double>({2, 3, 4, 4}, rng);
  BnFixture bn(3);
  bn.gamma.fill(0.0);
  bn.beta = Tensor<double>({1, 3, 1, 1}, {0.5, -2.0, 3.0});
  Tape<double> tape(false);
  auto y = tape.value(batchnorm2d(tape, tape.leaf(x), tape.leaf(bn.gamma), tape.leaf(bn.beta), bn.stats(), Mode::Train));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(y[(n * 3 + c) * 16 + i], bn.beta[c]);
}

TEST(BatchNorm2d, OutputMoments) {
  std::mt19937_64 rng(9);
  auto x = random_tensor<double>({4, 3, 5, 5}, rng, -3.0, 7.0);
  BnFixture bn(3);
  Tape<double> tape(false);
  auto y = tape.value(batchnorm2d(tape, tape.leaf(x), tape.leaf(bn.gamma), tape.leaf(bn.beta), bn.stats(), Mode::Train));
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 25; ++i) m += y[(n * 3 + c) * 25 + i];
    m /= 100;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 25; ++i) v += std::pow(y[(n * 3 + c) * 25 + i] - m, 2);
    v /= 100;
    EXPECT_LE(std::abs(m), 1e-6);
    EXPECT_NEAR(v, 1.0, 1e-4);
  }
}

TEST(BatchNorm2d, RunningStatsAndInference) {
  Tensor<double> x({2, 1, 1, 2}, {1, 2, 3, 4});  // mean 2.5, biased var 1.25
  BnFixture bn(1);
  {
    Tape<double> tape(false);
    EXPECT_THROW(
        batchnorm2d(tape, tape.leaf(x), tape.leaf(bn.gamma), tape.leaf(bn.beta), bn.stats(), Mode::Infer),
        std::logic_error);
  }
  {
    Tape<double> tape(false);
    batchnorm2d(tape, tape.leaf(x), tape.leaf(bn.gamma), tape.leaf(bn.beta), bn.stats(), Mode::Train);
  }
  EXPECT_DOUBLE_EQ(bn.mean[0], 2.5);
  EXPECT_DOUBLE_EQ(bn.var[0], 1.25);
  Tensor<double> x2({2, 1, 1, 2}, {5, 5, 5, 5});
  {
    Tape<double> tape(false);
    batchnorm2d(tape, tape.leaf(x2), tape.leaf(bn.gamma), tape.leaf(bn.beta), bn.stats(), Mode::Train);
  }
  EXPECT_DOUBLE_EQ(bn.mean[0], 0.9 * 2.5 + 0.1 * 5.0);
  EXPECT_DOUBLE_EQ(bn.var[0], 0.9 * 1.25);
  Tape<double> tape(false);
  auto y = tape.value(batchnorm2d(tape, tape.leaf(x), tape.leaf(bn.gamma), tape.leaf(bn.beta), bn.stats(), Mode::Infer));
  EXPECT_NEAR(y[0], (1.0 - bn.mean[0]) / std::sqrt(bn.var[0] + 1e-5), 1e-12);
}

TEST(Activation, ReluAndSigmoidValues) {
  Tensor<double> x({1, 1, 1, 3}, {-1.0, 2.0, 0.0});
  Tape<double> tape(false);
  Var xv = tape.leaf(x);
  auto r = tape.value(activation(tape, xv, Activation::Relu));
  EXPECT_EQ(r[0], 0.0);
  EXPECT_EQ(r[1], 2.0);
  auto s = tape.value(activation(tape, xv, Activation::Sigmoid));
  EXPECT_EQ(s[2], 0.5);
  for (double v : s.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Activation, SigmoidSymmetry) {
  std::mt19937_64 rng(10);
  auto x = random_tensor<double>({1, 2, 5, 5}, rng, -20, 20);
  Tensor<double> neg = x;
  for (auto& v : neg.data()) v = -v;
  Tape<double> tape(false);
  auto a = tape.value(sigmoid(tape, tape.leaf(x)));
  auto b = tape.value(sigmoid(tape, tape.leaf(neg)));
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i] + b[i], 1.0, 1e-15);
}

TEST(Softmax, UniformAndAnalytic) {
  Tape<double> tape(false);
  auto u = tape.value(softmax(tape, tape.leaf(Tensor<double>({1, 7, 1, 1}, 3.0))));
  for (double v : u.data()) EXPECT_NEAR(v, 1.0 / 7.0, 1e-15);
  auto p = tape.value(softmax(tape, tape.leaf(Tensor<double>({1, 2, 1, 1}, {0.0, std::log(3.0)}))));
  EXPECT_NEAR(p[0], 0.25, 1e-15);
  EXPECT_NEAR(p[1], 0.75, 1e-15);
}

TEST(Softmax, ShiftInvariantAndNormalized) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> shift(-50, 50);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor<double>({3, 5, 1, 1}, rng, -10, 10);
    Tensor<double> xs = x;
    const double c = shift(rng);
    for (auto& v : xs.data()) v += c;
    Tape<double> tape(false);
    auto a = tape.value(softmax(tape, tape.leaf(x)));
    auto b = tape.value(softmax(tape, tape.leaf(xs)));
    for (std::size_t n = 0; n < 3; ++n) {
      double s = 0;
      for (std::size_t k = 0; k < 5; ++k) {
        EXPECT_NEAR(a[n * 5 + k], b[n * 5 + k], 1e-7);
        s += a[n * 5 + k];
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(ConcatChannels, ShapeAndSliceRecovery) {
  std::mt19937_64 rng(12);
  auto a = random_tensor<double>({1, 2, 4, 4}, rng);
  auto b = random_tensor<double>({1, 3, 4, 4}, rng);
  Tape<double> tape(false);
  auto y = tape.value(concat_channels(tape, tape.leaf(a), tape.leaf(b)));
  EXPECT_EQ(y.shape(), (Shape{1, 5, 4, 4}));
  EXPECT_EQ(channel_slice(y, 0, 2).vec(), a.vec());
  EXPECT_EQ(channel_slice(y, 2, 5).vec(), b.vec());
  EXPECT_THROW(concat_channels(tape, tape.leaf(a), tape.leaf(Tensor<double>({1, 3, 4, 2}))), ShapeError);
}

TEST(ConcatChannels, BackwardSplitsByChannel) {
  std::mt19937_64 rng(13);
  auto a = random_tensor<double>({2, 2, 3, 3}, rng);
  auto b = random_tensor<double>({2, 1, 3, 3}, rng);
  auto r = random_tensor<double>({2, 3, 3, 3}, rng);
  Tape<double> tape;
  Var av = tape.leaf(a, true), bv = tape.leaf(b, true);
  tape.backward(sum(tape, mul(tape, concat_channels(tape, av, bv), tape.leaf(r))));
  EXPECT_EQ(tape.grad(av), channel_slice(r, 0, 2).vec());
  EXPECT_EQ(tape.grad(bv), channel_slice(r, 2, 3).vec());
}

TEST(AddElementwise, Identities) {
  std::mt19937_64 rng(14);
  auto a = random_tensor<double>({2, 3, 4, 4}, rng);
  auto b = random_tensor<double>({2, 3, 4, 4}, rng);
  Tensor<double> neg = a;
  for (auto& v : neg.data()) v = -v;
  Tape<double> tape(false);
  Var av = tape.leaf(a);
  EXPECT_EQ(tape.value(add(tape, av, tape.leaf(Tensor<double>(a.shape())))).vec(), a.vec());
  for (double v : tape.value(add(tape, av, tape.leaf(neg))).data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(tape.value(add(tape, av, tape.leaf(b))).vec(), tape.value(add(tape, tape.leaf(b), av)).vec());
  EXPECT_THROW(add(tape, av, tape.leaf(Tensor<double>({2, 3, 4, 2}))), ShapeError);
}

TEST(GlobalAvgPool, Means) {
  Tape<double> tape(false);
  EXPECT_EQ(tape.value(global_avg_pool(tape, tape.leaf(Tensor<double>({1, 1, 3, 5}, 1.75))))[0], 1.75);
  EXPECT_EQ(tape.value(global_avg_pool(tape, tape.leaf(Tensor<double>({1, 1, 2, 2}, {1, 2, 3, 4}))))[0], 2.5);
  std::mt19937_64 rng(15);
  auto x = random_tensor<double>({2, 3, 5, 6}, rng);
  auto y = tape.value(global_avg_pool(tape, tape.leaf(x)));
  ASSERT_EQ(y.shape(), (Shape{2, 3, 1, 1}));
  for (std::size_t nc = 0; nc < 6; ++nc) {
    double m = 0;
    for (std::size_t i = 0; i < 30; ++i) m += x[nc * 30 + i];
    EXPECT_NEAR(y[nc], m / 30, 1e-7);
  }
}

TEST(Backward, SumAndSquare) {
  std::mt19937_64 rng(16);
  auto x = random_tensor<double>({1, 2, 3, 3}, rng);
  {
    Tape<double> tape;
    Var xv = tape.leaf(x, true);
    tape.backward(sum(tape, xv));
    for (double g : tape.grad(xv)) EXPECT_EQ(g, 1.0);
  }
  {
    Tape<double> tape;
    Var xv = tape.leaf(x, true);
    tape.backward(sum(tape, mul(tape, xv, xv)));
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(tape.grad(xv)[i], 2 * x[i]);
  }
}

TEST(Backward, NonScalarLossRejected) {
  Tape<double> tape;
  Var xv = tape.leaf(Tensor<double>({1, 1, 2, 2}), true);
  EXPECT_THROW(tape.backward(relu(tape, xv)), ShapeError);
}

TEST(Backward, ParameterGradientsAccumulate) {
  Tensor<double> p({1, 1, 1, 2}, {1.0, -2.0});
  for (int pass = 1; pass <= 2; ++pass) {
    Tape<double> tape;
    Var pv = tape.param(p);
    EXPECT_EQ(tape.param(p).id, pv.id);
    tape.backward(sum(tape, add(tape, pv, pv)));
    EXPECT_EQ(p.grad()[0], 2.0 * pass);
  }
}

TEST(AdjointIdentity, LinearOps) {
  std::mt19937_64 rng(17);
  // For each linear map L: <L(x), y> == <x, L^T(y)> with L^T taken from backward.
  auto check = [&](const char* what, auto&& build, Shape in_shape) {
    SCOPED_TRACE(what);
    auto x = random_tensor<double>(in_shape, rng);
    Tape<double> probe(false);
    const Shape out_shape = probe.shape(build(probe, probe.leaf(x)));
    auto y = random_tensor<double>(out_shape, rng);
    Tape<double> tape;
    Var xv = tape.leaf(x, true);
    Var out = build(tape, xv);
    Var loss = sum(tape, mul(tape, out, tape.leaf(y)));
    tape.backward(loss);
    const double lhs = tape.value(loss)[0];
    const double rhs = inner(x.vec(), tape.grad(xv));
    EXPECT_LE(std::abs(lhs - rhs), 1e-5 * std::max(1.0, std::abs(lhs)));
  };
  auto w = random_tensor<double>({4, 3, 3, 3}, rng);
  auto wt = random_tensor<double>({3, 2, 2, 2}, rng);
  Tensor<double> other({2, 2, 6, 6});  // zero, so concat stays linear in x
  check("conv s1", [&](Tape<double>& t, Var x) { return conv2d(t, x, t.leaf(w), std::nullopt, 1, 1); }, {2, 3, 6, 6});
  check("conv s2", [&](Tape<double>& t, Var x) { return conv2d(t, x, t.leaf(w), std::nullopt, 2, 1); }, {2, 3, 7, 7});
  check("conv_transpose", [&](Tape<double>& t, Var x) { return conv_transpose2d(t, x, t.leaf(wt), std::nullopt, 2); }, {2, 3, 3, 3});
  check("concat", [&](Tape<double>& t, Var x) { return concat_channels(t, x, t.leaf(other)); }, {2, 3, 6, 6});
  check("gap", [&](Tape<double>& t, Var x) { return global_avg_pool(t, x); }, {2, 3, 6, 6});
}

TEST(Determinism, RepeatedForwardIsBitIdentical) {
  std::mt19937_64 rng(18);
  auto x = random_tensor<float>({2, 4, 16, 16}, rng);
  auto w = random_tensor<float>({8, 4, 3, 3}, rng);
  auto once = [&] {
    Tape<float> tape(false);
    return tape.value(relu(tape, conv2d(tape, tape.leaf(x), tape.leaf(w), std::nullopt, 1, 1)));
  };
  EXPECT_EQ(once().vec(), once().vec());
}

TEST(Sigmoid, StaysInsideOpenIntervalWhenSaturated) {
  Tensor<float> x({1, 1, 1, 4}, {-200.0f, -20.0f, 20.0f, 200.0f});
  Tape<float> tape(false);
  const auto y = tape.value(sigmoid(tape, tape.leaf(x)));
  for (float v : y.data()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
  EXPECT_LT(y[0], y[1]);
}

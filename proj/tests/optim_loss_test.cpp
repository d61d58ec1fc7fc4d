#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "nabla/loss.hpp"
#include "nabla/ops.hpp"
#include "nabla/optim.hpp"
#include "test_util.hpp"

using namespace nabla;
using nabla::test::random_tensor;

namespace {

double bce(const Tensor<double>& p, const Tensor<double>& t) {
  Tape<double> tape(false);
  return tape.value(bce_loss(tape, tape.leaf(p), t))[0];
}

double cce(const Tensor<double>& p, const std::vector<int>& labels) {
  Tape<double> tape(false);
  return tape.value(cce_loss(tape, tape.leaf(p), labels))[0];
}

/// Runs `steps` optimizer updates on f(x) = x^2 from x0.
template <typename Opt>
std::vector<double> descend_square(Opt& opt, double x0, int steps) {
  Tensor<double> x({1, 1, 1, 1}, x0);
  std::vector<Tensor<double>*> params{&x};
  std::vector<double> trace;
  for (int i = 0; i < steps; ++i) {
    x.grad()[0] = 2 * x[0];
    opt.step(params);
    trace.push_back(x[0]);
  }
  return trace;
}

}  // namespace

TEST(BceLoss, HalfEverywhereIsLn2) {
  Tensor<double> p({2, 1, 3, 3}, 0.5);
  Tensor<double> t(p.shape());
  for (std::size_t i = 0; i < t.numel(); i += 2) t[i] = 1;
  EXPECT_NEAR(bce(p, t), std::log(2.0), 1e-12);
}

TEST(BceLoss, PerfectPredictionIsNearZero) {
  Tensor<double> t({1, 1, 4, 4});
  for (std::size_t i = 0; i < t.numel(); i += 3) t[i] = 1;
  EXPECT_LE(bce(t, t), 1e-6 * std::abs(std::log(1e-7)));
  EXPECT_GE(bce(t, t), 0.0);
}

TEST(BceLoss, MatchesDirectFormulaAndIsNonNegative) {
  std::mt19937_64 rng(1);
  auto p = random_tensor<double>({3, 1, 5, 5}, rng, 0.01, 0.99);
  Tensor<double> t(p.shape());
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = (rng() % 2) ? 1.0 : 0.0;
  double ref = 0;
  for (std::size_t i = 0; i < p.numel(); ++i) ref -= t[i] * std::log(p[i]) + (1 - t[i]) * std::log(1 - p[i]);
  ref /= static_cast<double>(p.numel());
  EXPECT_NEAR(bce(p, t), ref, 1e-12);
  EXPECT_GE(bce(p, t), 0.0);
}

TEST(BceLoss, ClampsAtBoundary) {
  Tensor<double> p({1, 1, 1, 2}, {0.0, 1.0});
  Tensor<double> t({1, 1, 1, 2}, {1.0, 0.0});
  EXPECT_NEAR(bce(p, t), -std::log(1e-7), 1e-6);
}

TEST(BceLoss, GradientClosedForm) {
  Tensor<double> p({1, 1, 1, 4}, {0.2, 0.7, 0.5, 0.9});
  Tensor<double> t({1, 1, 1, 4}, {1.0, 0.0, 1.0, 1.0});
  Tape<double> tape;
  Var pv = tape.leaf(p, true);
  tape.backward(bce_loss(tape, pv, t));
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(tape.grad(pv)[i], (p[i] - t[i]) / (p[i] * (1 - p[i])) / 4.0, 1e-12);
  }
}

TEST(BceLoss, RejectsNonBinaryTargetAndShapeMismatch) {
  Tensor<double> p({1, 1, 2, 2}, 0.5);
  EXPECT_THROW(bce(p, Tensor<double>({1, 1, 2, 2}, 0.5)), std::invalid_argument);
  EXPECT_THROW(bce(p, Tensor<double>({1, 1, 2, 3})), ShapeError);
}

TEST(CceLoss, UniformOverSevenIsLn7) {
  Tensor<double> p({3, 7, 1, 1}, 1.0 / 7.0);
  EXPECT_NEAR(cce(p, {0, 3, 6}), std::log(7.0), 1e-12);
}

TEST(CceLoss, OneHotCorrectIsNearZero) {
  Tensor<double> p({2, 3, 1, 1}, {0, 1, 0, 1, 0, 0});
  EXPECT_NEAR(cce(p, {1, 0}), 0.0, 1.01e-7);  // p = 1 is clamped to 1 - 1e-7
}

TEST(CceLoss, SoftmaxGradientIsProbabilityMinusOneHot) {
  std::mt19937_64 rng(2);
  auto logits = random_tensor<double>({4, 5, 1, 1}, rng, -3, 3);
  const std::vector<int> labels{4, 0, 2, 2};
  Tape<double> tape;
  Var z = tape.leaf(logits, true);
  Var p = softmax(tape, z);
  tape.backward(cce_loss(tape, p, labels));
  const auto& probs = tape.value(p);
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t k = 0; k < 5; ++k) {
      const double onehot = static_cast<int>(k) == labels[n] ? 1.0 : 0.0;
      EXPECT_NEAR(tape.grad(z)[n * 5 + k], (probs[n * 5 + k] - onehot) / 4.0, 1e-12);
    }
}

TEST(CceLoss, LabelValidation) {
  Tensor<double> p({2, 3, 1, 1}, 1.0 / 3.0);
  EXPECT_THROW(cce(p, {0, 3}), std::out_of_range);
  EXPECT_THROW(cce(p, {-1, 0}), std::out_of_range);
  EXPECT_THROW(cce(p, {0}), ShapeError);
  EXPECT_THROW(cce(Tensor<double>({1, 3, 2, 2}), {0}), ShapeError);
}

TEST(Adam, FirstStepIsLearningRateRegardlessOfScale) {
  for (double g : {1e-6, 1.0, 1e4, -50.0}) {
    Tensor<double> x({1, 1, 1, 1}, 0.0);
    x.grad()[0] = g;
    std::vector<Tensor<double>*> params{&x};
    Adam<double> opt;
    opt.step(params);
    EXPECT_NEAR(std::abs(x[0]), 3e-4, 3e-4 * 1e-2) << "g=" << g;
    EXPECT_EQ(x[0] < 0, g > 0);
  }
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  std::mt19937_64 rng(3);
  auto x = random_tensor<double>({1, 2, 3, 3}, rng);
  const auto before = x.vec();
  x.zero_grad();
  x.grad();
  std::vector<Tensor<double>*> params{&x};
  Adam<double> opt;
  for (int i = 0; i < 5; ++i) opt.step(params);
  EXPECT_EQ(x.vec(), before);
  EXPECT_EQ(opt.steps(), 5u);
}

TEST(Adam, DescendsSquareToOrigin) {
  Adam<double> opt({.lr = 0.1});
  const auto trace = descend_square(opt, 1.0, 100);
  EXPECT_LT(std::abs(trace.back()), 0.01) << trace.back();
}

TEST(Adam, MatchesHandRolledRecurrence) {
  Adam<double> opt({.lr = 0.05});
  const auto trace = descend_square(opt, 0.7, 20);
  double x = 0.7, m = 0, v = 0;
  for (int t = 1; t <= 20; ++t) {
    const double g = 2 * x;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    x -= 0.05 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    EXPECT_NEAR(trace[t - 1], x, 1e-12) << "t=" << t;
  }
  ASSERT_EQ(opt.first_moments().size(), 1u);
  EXPECT_NEAR(opt.first_moments()[0][0], m, 1e-12);
}

TEST(Adam, RejectsChangedParameterList) {
  Tensor<double> a({1, 1, 1, 1}), b({1, 1, 1, 1});
  a.grad();
  Adam<double> opt;
  std::vector<Tensor<double>*> one{&a}, two{&a, &b};
  opt.step(one);
  EXPECT_THROW(opt.step(two), ShapeError);
}

TEST(SgdMomentum, FirstStepIsPlainGradientStep) {
  Tensor<double> x({1, 1, 1, 2}, {1.0, -2.0});
  x.grad() = {0.5, 3.0};
  std::vector<Tensor<double>*> params{&x};
  SgdMomentum<double> opt;
  opt.step(params);
  EXPECT_DOUBLE_EQ(x[0], 1.0 - 0.01 * 0.5);
  EXPECT_DOUBLE_EQ(x[1], -2.0 - 0.01 * 3.0);
}

TEST(SgdMomentum, VelocityApproachesTenTimesGradient) {
  Tensor<double> x({1, 1, 1, 1});
  std::vector<Tensor<double>*> params{&x};
  SgdMomentum<double> opt;
  for (int i = 0; i < 300; ++i) {
    x.grad()[0] = 0.25;
    opt.step(params);
  }
  EXPECT_NEAR(opt.velocity()[0][0], 2.5, 1e-9);
}

TEST(SgdMomentum, QuadraticMatchesClosedFormRecurrence) {
  // On f = x^2 the iterates obey x_{k+1} = (1 + mu - 2 lr) x_k - mu x_{k-1}.
  SgdMomentum<double> opt({.lr = 0.05, .momentum = 0.9});
  const auto trace = descend_square(opt, 1.0, 60);
  const double lr = 0.05, mu = 0.9;
  double prev = 1.0, cur = 1.0 - lr * 2.0;
  EXPECT_NEAR(trace[0], cur, 1e-15);
  for (std::size_t k = 1; k < trace.size(); ++k) {
    const double next = (1 + mu - 2 * lr) * cur - mu * prev;
    prev = cur;
    cur = next;
    EXPECT_NEAR(trace[k], cur, 1e-12) << "k=" << k;
  }
}

TEST(LrSchedule, StepDecay) {
  EXPECT_DOUBLE_EQ(lr_schedule(0, 0.01), 0.01);
  EXPECT_DOUBLE_EQ(lr_schedule(49, 0.01), 0.01);
  EXPECT_DOUBLE_EQ(lr_schedule(50, 0.01), 0.001);
  EXPECT_DOUBLE_EQ(lr_schedule(100, 0.01), 0.0001);
  EXPECT_DOUBLE_EQ(lr_schedule(149, 0.01), 0.0001);
  EXPECT_THROW(lr_schedule(-1, 0.01), std::invalid_argument);
}

TEST(LrSchedule, NonIncreasing) {
  double prev = lr_schedule(0, 0.01);
  for (int e = 1; e < 400; ++e) {
    const double cur = lr_schedule(e, 0.01);
    EXPECT_LE(cur, prev);
    prev = cur;
  }
}

#include <gtest/gtest.h>

#include <cmath>

#include "changetitans/gradcheck.hpp"
#include "changetitans/objectives.hpp"
#include "support.hpp"

using namespace ctitans;
namespace tt = ctitans::testing;

namespace {

Tensor random_target(std::mt19937_64& g, Shape shape) {
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = static_cast<double>(g() % 2);
  return t;
}

double bce_ref(const Tensor& p, const Tensor& t) {
  double s = 0;
  for (std::size_t i = 0; i < p.numel(); ++i) {
    const double q = std::clamp(p[i], kProbClamp, 1 - kProbClamp);
    s += t[i] * std::log(q) + (1 - t[i]) * std::log(1 - q);
  }
  return -s / p.numel();
}

double dice_ref(const Tensor& p, const Tensor& t, double eps) {
  double pt = 0, ps = 0, ts = 0;
  for (std::size_t i = 0; i < p.numel(); ++i) {
    pt += p[i] * t[i];
    ps += p[i];
    ts += t[i];
  }
  return 1 - (2 * pt + eps) / (ps + ts + eps);
}

}  // namespace

TEST(Bce, HalfProbabilityIsLn2) {
  std::mt19937_64 g(1);
  auto t = random_target(g, {7, 9});
  EXPECT_NEAR(bce_loss(Tensor({7, 9}, 0.5), t).item(), std::log(2.0), 1e-12);
}

TEST(Bce, MatchesDirectFormula) {
  std::mt19937_64 g(2);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = tt::random_tensor(g, {5, 6}, 0.01, 0.99);
    auto t = random_target(g, {5, 6});
    EXPECT_NEAR(bce_loss(p, t).item(), bce_ref(p, t), 1e-13);
  }
}

TEST(Bce, ClampKeepsExtremesFinite) {
  auto t = Tensor({2}, std::vector<Scalar>{1.0, 0.0});
  auto worst = bce_loss(Tensor({2}, std::vector<Scalar>{0.0, 1.0}), t).item();
  EXPECT_NEAR(worst, -std::log(kProbClamp), 1e-9);
  EXPECT_NEAR(bce_loss(Tensor({2}, std::vector<Scalar>{1.0, 0.0}), t).item(), -std::log(1 - kProbClamp), 1e-15);
}

TEST(Bce, AnalyticGradient) {
  std::mt19937_64 g(3);
  auto p = tt::random_tensor(g, {4, 4}, 0.05, 0.95).set_requires_grad();
  auto t = random_target(g, {4, 4});
  Tape::backward(bce_loss(p, t));
  auto gr = p.grad();
  for (std::size_t i = 0; i < 16; ++i)
    EXPECT_NEAR(gr[i], (p[i] - t[i]) / (p[i] * (1 - p[i]) * 16), 1e-12);
}

TEST(Dice, IdenticalMasksGiveZero) {
  std::mt19937_64 g(4);
  for (double eps : {1.0, 1e-3, 5.0}) {
    auto t = random_target(g, {8, 8});
    EXPECT_EQ(dice_loss(t, t, eps).item(), 0.0);
  }
  EXPECT_EQ(dice_loss(Tensor({3, 3}, 0.0), Tensor({3, 3}, 0.0), 1.0).item(), 0.0);
}

TEST(Dice, MatchesDirectFormulaAndBounds) {
  std::mt19937_64 g(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = tt::random_tensor(g, {6, 5}, 0, 1);
    auto t = random_target(g, {6, 5});
    const double d = dice_loss(p, t, 1.0).item();
    EXPECT_NEAR(d, dice_ref(p, t, 1.0), 1e-14);
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 1.0);
  }
  EXPECT_THROW(dice_loss(Tensor({2}), Tensor({2}), 0.0), std::invalid_argument);
}

TEST(TotalLoss, ZeroLambdaIsBitwiseBce) {
  std::mt19937_64 g(6);
  auto p = tt::random_tensor(g, {9, 9}, 0, 1);
  auto t = random_target(g, {9, 9});
  LossConfig cfg;
  cfg.lambda = 0;
  EXPECT_TRUE(tt::bitwise_equal(total_loss(p, t, cfg), bce_loss(p, t)));
  cfg.lambda = 0.7;
  EXPECT_NEAR(total_loss(p, t, cfg).item(), bce_ref(p, t) + 0.7 * dice_ref(p, t, 1.0), 1e-13);
}

TEST(Losses, GradientsMatchFiniteDifferences) {
  std::mt19937_64 g(7);
  auto p = tt::random_tensor(g, {5, 5}, 0.05, 0.95);
  auto t = random_target(g, {5, 5});
  LossConfig cfg;
  EXPECT_LT(grad_check([&](const Tensor& x) { return bce_loss(x, t); }, p), 1e-5);
  EXPECT_LT(grad_check([&](const Tensor& x) { return dice_loss(x, t, 1.0); }, p), 1e-5);
  EXPECT_LT(grad_check([&](const Tensor& x) { return total_loss(x, t, cfg); }, p), 1e-5);
}

TEST(Losses, ShapeMismatchThrows) {
  EXPECT_THROW(bce_loss(Tensor({2, 2}), Tensor({4})), ShapeError);
  EXPECT_THROW(dice_loss(Tensor({2, 2}), Tensor({2, 3}), 1.0), ShapeError);
}

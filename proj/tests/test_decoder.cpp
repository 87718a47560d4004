#include <gtest/gtest.h>

#include <algorithm>

#include "changetitans/decoder.hpp"
#include "changetitans/gradcheck.hpp"
#include "support.hpp"

using namespace ctitans;
namespace tt = ctitans::testing;

namespace {

DecoderConfig small_decoder() {
  DecoderConfig cfg;
  cfg.dim = 8;
  cfg.out_channels = 4;
  cfg.heads = 2;
  cfg.persistent = 2;
  cfg.ffn_ratio = 2;
  return cfg;
}

FeaturePyramid random_pyramid(std::mt19937_64& g, std::size_t C, std::size_t finest) {
  FeaturePyramid p;
  for (std::size_t j = 0; j < 4; ++j) p[j] = tt::random_tensor(g, {C, finest >> j, finest >> j});
  return p;
}

void randomize(Tensor& t, std::mt19937_64& g, double s) {
  std::uniform_real_distribution<double> u(-s, s);
  for (auto& v : t.mutable_data()) v = u(g);
}

}  // namespace

TEST(Decoder, ShapeChain) {
  Rng rng(1);
  Decoder d(small_decoder(), rng);
  std::mt19937_64 g(1);
  auto p = random_pyramid(g, 8, 16);
  auto y = d.decode(p);
  EXPECT_EQ(y.shape(), (Shape{4, 16, 16}));
  EXPECT_EQ(d(p).shape(), (Shape{64, 64}));
  EXPECT_EQ(d.stages[0](p[3], p[2]).shape(), (Shape{8, 4, 4}));
  p[1] = tt::random_tensor(g, {8, 7, 8});
  EXPECT_THROW(d.decode(p), ShapeError);
  EXPECT_THROW(d.stages[0](p[3], p[3]), ShapeError);
}

TEST(Decoder, BilinearVariantShapeAndParameters) {
  auto cfg = small_decoder();
  cfg.upsampling = UpsampleKind::Bilinear;
  Rng rng(2);
  Decoder d(cfg, rng);
  std::mt19937_64 g(2);
  EXPECT_EQ(d(random_pyramid(g, 8, 8)).shape(), (Shape{32, 32}));
  ParamList params;
  d.collect("", params);
  for (auto& [name, t] : params) EXPECT_EQ(name.find("convex_head"), std::string::npos) << name;
}

TEST(Decoder, Deterministic) {
  Rng r1(3), r2(3);
  Decoder a(small_decoder(), r1), b(small_decoder(), r2);
  std::mt19937_64 g(3);
  auto p = random_pyramid(g, 8, 8);
  EXPECT_TRUE(tt::bitwise_equal(a(p), b(p)));
  EXPECT_TRUE(tt::bitwise_equal(a(p), a(p)));
}

TEST(Decoder, UpsampledLogitsAreConvexCombinations) {
  Rng rng(4);
  Decoder d(small_decoder(), rng);
  std::mt19937_64 g(4);
  randomize(d.head.logits.weight, g, 2.0);
  for (int trial = 0; trial < 5; ++trial) {
    auto y = tt::random_tensor(g, {4, 6, 5}, -3, 3);
    auto lr = d.to_logit(y);
    auto hr = d.upsample_logits(y);
    ASSERT_EQ(hr.shape(), (Shape{24, 20}));
    const auto [lo, hi] = std::minmax_element(lr.data().begin(), lr.data().end());
    for (auto v : hr.data()) {
      EXPECT_GE(v, *lo - 1e-12);
      EXPECT_LE(v, *hi + 1e-12);
    }
    auto w = d.head.weights(y);
    for (std::size_t pix = 0; pix < 24 * 20; ++pix) {
      double s = 0;
      for (std::size_t n = 0; n < 9; ++n) s += w[n * 480 + pix];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Decoder, ConstantLowResolutionMapStaysConstant) {
  Rng rng(5);
  Decoder d(small_decoder(), rng);
  std::mt19937_64 g(5);
  randomize(d.head.logits.weight, g, 2.0);
  Tensor y({4, 5, 5});
  auto yd = y.mutable_data();
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < 25; ++i) yd[c * 25 + i] = 0.3 * c - 0.4;
  auto hr = d.upsample_logits(y);
  const double v0 = d.to_logit(y)[0];
  for (auto v : hr.data()) EXPECT_NEAR(v, v0, 1e-12);
}

TEST(Decoder, ZeroLogitHeadStartsAsBoxFilter) {
  Rng rng(6);
  Decoder d(small_decoder(), rng);
  std::mt19937_64 g(6);
  auto y = tt::random_tensor(g, {4, 4, 4});
  auto w = d.head.weights(y);
  for (auto v : w.data()) EXPECT_NEAR(v, 1.0 / 9.0, 1e-15);
}

TEST(Decoder, GradientsMatchFiniteDifferences) {
  auto cfg = small_decoder();
  cfg.persistent = 1;
  Rng rng(7);
  Decoder d(cfg, rng);
  std::mt19937_64 g(7);
  randomize(d.head.logits.weight, g, 0.5);
  auto p = random_pyramid(g, 8, 8);
  auto proj = tt::random_tensor(g, {32, 32});
  ParamList params;
  d.collect("", params);
  std::vector<Tensor> leaves;
  for (auto& [name, t] : params) leaves.push_back(t);
  auto err = grad_check_params([&] { return sum(mul(d(p), proj)); }, leaves, 1e-5, 3);
  EXPECT_LT(err, 1e-4);
}

TEST(Predict, HalfProbabilityIsUnchanged) {
  auto m = predict(Tensor({2, 2}, std::vector<Scalar>{0.0, 1e-9, -1e-9, 5.0}));
  EXPECT_EQ(m.height, 2u);
  EXPECT_EQ(m.width, 2u);
  EXPECT_EQ(m.probability[0], 0.5);
  EXPECT_EQ(m.mask, (std::vector<std::uint8_t>{0, 1, 0, 1}));
  EXPECT_THROW(predict(Tensor({4})), ShapeError);
  EXPECT_EQ(binarize(Tensor({3}, std::vector<Scalar>{0.2, 0.3, 0.9}), 0.25),
            (std::vector<std::uint8_t>{0, 1, 1}));
}

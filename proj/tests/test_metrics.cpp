#include <gtest/gtest.h>

#include <cmath>

#include "changetitans/metrics.hpp"
#include "support.hpp"

using namespace ctitans;
namespace tt = ctitans::testing;

namespace {

BinaryMask from_rows(const std::vector<std::string>& rows) {
  std::vector<std::uint8_t> px;
  for (const auto& r : rows)
    for (char ch : r) px.push_back(ch == '#' ? 1 : 0);
  return BinaryMask(rows.size(), rows[0].size(), std::move(px));
}

BinaryMask square(std::size_t n, std::size_t r0, std::size_t c0, std::size_t side) {
  auto m = BinaryMask::zeros(n, n);
  for (std::size_t r = r0; r < r0 + side; ++r)
    for (std::size_t c = c0; c < c0 + side; ++c) m.pixels[r * n + c] = 1;
  return m;
}

// Pairs with a mix of sizes, densities and empty masks.
std::pair<BinaryMask, BinaryMask> random_pair(std::mt19937_64& g, int i) {
  const std::size_t h = 1 + g() % 32, w = 1 + g() % 32;
  auto make = [&](int kind) {
    switch (kind) {
      case 0: return BinaryMask::zeros(h, w);
      case 1: return tt::random_mask(g, h, w, 0.3);
      default: return tt::random_blobs(g, h, w, 1 + static_cast<int>(g() % 4));
    }
  };
  const int kp = i % 17 == 0 ? 0 : 1 + static_cast<int>(g() % 2);
  const int kg = i % 13 == 0 ? 0 : 1 + static_cast<int>(g() % 2);
  return {make(kp), make(kg)};
}

}  // namespace

TEST(Metrics, HandCase) {
  auto pred = BinaryMask(2, 2, {1, 0, 0, 0});
  auto gt = BinaryMask(2, 2, {1, 1, 0, 0});
  auto c = confusion(pred, gt);
  EXPECT_EQ(c, (ConfusionCounts{1, 0, 1, 2}));
  auto m = pixel_metrics(c);
  EXPECT_DOUBLE_EQ(m.precision, 1.0);
  EXPECT_DOUBLE_EQ(m.recall, 0.5);
  EXPECT_DOUBLE_EQ(m.iou, 0.5);
  EXPECT_DOUBLE_EQ(m.f1, 2.0 / 3.0);
  EXPECT_FALSE(m.degenerate);
}

TEST(Metrics, DegenerateConventions) {
  auto empty = BinaryMask::zeros(4, 4);
  auto m = pixel_metrics(confusion(empty, empty));
  EXPECT_TRUE(m.degenerate);
  EXPECT_EQ(m.f1, 1.0);
  EXPECT_EQ(m.iou, 1.0);
  auto full = square(4, 0, 0, 4);
  auto miss = pixel_metrics(confusion(empty, full));
  EXPECT_TRUE(miss.degenerate);
  EXPECT_EQ(miss.precision, 0.0);
  EXPECT_EQ(miss.recall, 0.0);
  EXPECT_EQ(miss.f1, 0.0);
  EXPECT_EQ(hausdorff(empty, empty), 0.0);
  EXPECT_EQ(hausdorff(empty, full), kInfiniteDistance);
  EXPECT_EQ(boundary_f1(empty, empty, 2), 1.0);
  EXPECT_EQ(boundary_f1(full, empty, 2), 0.0);
  auto t = trimap_miou(full, empty, 3);
  EXPECT_TRUE(t.degenerate);
  EXPECT_EQ(t.value, 0.0);
  EXPECT_EQ(trimap_miou(empty, empty, 3).value, 1.0);
}

TEST(Metrics, HausdorffBetweenSinglePixels) {
  auto a = BinaryMask::zeros(6, 6), b = BinaryMask::zeros(6, 6);
  a.pixels[0] = 1;
  b.pixels[3 * 6 + 4] = 1;
  EXPECT_DOUBLE_EQ(hausdorff(a, b), 5.0);
  EXPECT_DOUBLE_EQ(hausdorff(b, a), 5.0);
}

TEST(Metrics, ShiftedSquareKeepsBoundaryF1WithinTolerance) {
  auto a = square(16, 4, 4, 6), b = square(16, 5, 5, 6);
  EXPECT_DOUBLE_EQ(boundary_f1(a, b, 2.0), 1.0);
  EXPECT_LT(boundary_f1(a, b, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(hausdorff(a, b), std::sqrt(2.0));
}

TEST(Metrics, BoundaryMarksEdgesAndBorder) {
  auto m = from_rows({"#####", "#####", "#####", ".....", "..#.."});
  auto b = boundary(m);
  auto expected = from_rows({"#####", "#...#", "#####", ".....", "..#.."});
  EXPECT_EQ(b, expected);
}

TEST(Metrics, BoundaryF1IsMonotoneInTolerance) {
  std::mt19937_64 g(11);
  for (int i = 0; i < 30; ++i) {
    auto p = tt::random_blobs(g, 20, 20, 3), q = tt::random_blobs(g, 20, 20, 3);
    double prev = 0;
    for (double tau : {0.0, 1.0, 1.5, 2.0, 3.0, 5.0, 30.0}) {
      const double v = boundary_f1(p, q, tau);
      EXPECT_GE(v, prev - 1e-15);
      prev = v;
    }
  }
}

TEST(Metrics, MatchBruteForceOnRandomPairs) {
  std::mt19937_64 g(12);
  for (int i = 0; i < 200; ++i) {
    auto [p, q] = random_pair(g, i);
    auto rc = tt::ref_confusion(p, q);
    auto c = confusion(p, q);
    ASSERT_EQ(c, (ConfusionCounts{rc.tp, rc.fp, rc.fn, rc.tn})) << i;
    // Boundary and distance transform.
    const auto rb = tt::ref_boundary(p);
    const auto b = boundary(p);
    std::size_t count = 0;
    for (auto v : b.pixels) count += v;
    ASSERT_EQ(count, rb.size());
    for (auto [r, col] : rb) ASSERT_EQ(b.at(r, col), 1);
    const auto d = squared_distance_transform(q);
    std::vector<std::pair<int, int>> qs;
    for (std::size_t r = 0; r < q.height; ++r)
      for (std::size_t col = 0; col < q.width; ++col)
        if (q.at(r, col)) qs.emplace_back(r, col);
    for (std::size_t r = 0; r < q.height; ++r)
      for (std::size_t col = 0; col < q.width; ++col)
        ASSERT_EQ(d[r * q.width + col], tt::ref_min_dist2(int(r), int(col), qs));
    for (double tau : {0.0, 1.0, 2.0, 3.5})
      EXPECT_NEAR(boundary_f1(p, q, tau), tt::ref_boundary_f1(p, q, tau), 1e-12) << i;
    const double h = hausdorff(p, q), rh = tt::ref_hausdorff(p, q);
    if (std::isinf(rh)) EXPECT_TRUE(std::isinf(h));
    else EXPECT_NEAR(h, rh, 1e-12) << i;
    for (double width : {1.0, 3.0}) {
      auto t = trimap_miou(p, q, width);
      auto rt = tt::ref_trimap(p, q, width);
      EXPECT_NEAR(t.value, rt.value, 1e-12) << i;
      EXPECT_EQ(t.degenerate, rt.degenerate) << i;
    }
  }
}

TEST(Metrics, IdenticalMasksScorePerfectly) {
  std::mt19937_64 g(13);
  for (int i = 0; i < 20; ++i) {
    auto m = tt::random_blobs(g, 24, 24, 3);
    auto r = evaluate(m, m);
    EXPECT_EQ(r.f1, 1.0);
    EXPECT_EQ(r.iou, 1.0);
    EXPECT_EQ(r.bf1, 1.0);
    EXPECT_EQ(r.trimap_miou, 1.0);
    EXPECT_EQ(r.hausdorff, 0.0);
  }
}

TEST(Metrics, RejectsBadInput) {
  EXPECT_THROW(BinaryMask(2, 2, {0, 1, 2, 0}), std::invalid_argument);
  EXPECT_THROW(BinaryMask(2, 2, {0, 1}), std::invalid_argument);
  EXPECT_THROW(confusion(BinaryMask::zeros(2, 2), BinaryMask::zeros(2, 3)), std::invalid_argument);
  EXPECT_THROW(boundary_f1(BinaryMask::zeros(2, 2), BinaryMask::zeros(2, 2), -1), std::invalid_argument);
  EXPECT_THROW(trimap_miou(BinaryMask::zeros(2, 2), BinaryMask::zeros(2, 2), 0.5), std::invalid_argument);
}

TEST(Metrics, ReportFormats) {
  auto r = evaluate(square(8, 0, 0, 4), BinaryMask::zeros(8, 8));
  EXPECT_EQ(r.hausdorff, kInfiniteDistance);
  EXPECT_NE(report_text(r).find("hausdorff=inf"), std::string::npos);
  EXPECT_EQ(report_csv_header().rfind("# changetitans metrics csv v1\n", 0), 0u);
  auto row = report_csv_row("a", r);
  EXPECT_EQ(row.rfind("a,", 0), 0u);
  EXPECT_EQ(std::count(row.begin(), row.end(), ','), 10);
}

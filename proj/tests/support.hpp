#pragma once

// Independent reference implementations shared by the unit tests and the
// acceptance runner. Everything here works on plain vectors with naive loops
// so it shares no code path with the library kernels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "changetitans/memory.hpp"
#include "changetitans/metrics.hpp"
#include "changetitans/tensor.hpp"

namespace ctitans::testing {

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<Scalar> v(numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

inline double max_abs_diff(std::span<const Scalar> a, std::span<const Scalar> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return a.size() == b.size() ? m : std::numeric_limits<double>::infinity();
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  return true;
}

// ---- memory recurrence -----------------------------------------------------

// Row-major dense matrix.
struct Mat {
  std::size_t rows = 0, cols = 0;
  std::vector<double> v;
  Mat() = default;
  Mat(std::size_t r, std::size_t c, double fill = 0) : rows(r), cols(c), v(r * c, fill) {}
  explicit Mat(const Tensor& t)
      : rows(t.rank() == 1 ? 1 : t.dim(0)), cols(t.rank() == 1 ? t.dim(0) : t.dim(1)), v(t.to_vector()) {}
  double& operator()(std::size_t r, std::size_t c) { return v[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
};

inline Mat matmul_ref(const Mat& a, const Mat& b) {
  Mat out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.cols; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < a.cols; ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

// The memory MLP M(x) = tanh(x W1 + b1) W2 + b2 as four plain matrices.
struct RefMemory {
  Mat w1, b1, w2, b2;
  std::vector<Mat*> parts() { return {&w1, &b1, &w2, &b2}; }
};

inline RefMemory to_ref(const MemoryMLP& m) { return {Mat(m.w1), Mat(m.b1), Mat(m.w2), Mat(m.b2)}; }

// Gradient of mean_n ||M(x Wk) - x Wv||^2 with respect to W1, b1, W2, b2,
// derived by hand.
inline RefMemory ref_memory_grad(const RefMemory& m, const Mat& wk, const Mat& wv, const Mat& x) {
  const std::size_t n = x.rows;
  const Mat k = matmul_ref(x, wk), v = matmul_ref(x, wv);
  Mat h = matmul_ref(k, m.w1);
  for (std::size_t i = 0; i < h.rows; ++i)
    for (std::size_t j = 0; j < h.cols; ++j) h(i, j) = std::tanh(h(i, j) + m.b1(0, j));
  Mat r = matmul_ref(h, m.w2);
  for (std::size_t i = 0; i < r.rows; ++i)
    for (std::size_t j = 0; j < r.cols; ++j) r(i, j) = 2.0 * (r(i, j) + m.b2(0, j) - v(i, j)) / n;

  RefMemory g{Mat(m.w1.rows, m.w1.cols), Mat(1, m.b1.cols), Mat(m.w2.rows, m.w2.cols), Mat(1, m.b2.cols)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < h.cols; ++a)
      for (std::size_t b = 0; b < r.cols; ++b) g.w2(a, b) += h(i, a) * r(i, b);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t b = 0; b < r.cols; ++b) g.b2(0, b) += r(i, b);
  Mat dz(n, h.cols);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < h.cols; ++a) {
      double s = 0;
      for (std::size_t b = 0; b < r.cols; ++b) s += r(i, b) * m.w2(a, b);
      dz(i, a) = s * (1.0 - h(i, a) * h(i, a));
    }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k.cols; ++c)
      for (std::size_t a = 0; a < h.cols; ++a) g.w1(c, a) += k(i, c) * dz(i, a);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < h.cols; ++a) g.b1(0, a) += dz(i, a);
  return g;
}

// One step of S = eta S - theta g; M = (1 - alpha) M + S, elementwise.
inline void ref_memory_step(RefMemory& m, RefMemory& s, const Mat& wk, const Mat& wv, const Mat& x,
                            double theta, double eta, double alpha) {
  RefMemory g = ref_memory_grad(m, wk, wv, x);
  auto mp = m.parts(), sp = s.parts(), gp = g.parts();
  for (std::size_t p = 0; p < mp.size(); ++p)
    for (std::size_t i = 0; i < mp[p]->v.size(); ++i) {
      sp[p]->v[i] = eta * sp[p]->v[i] - theta * gp[p]->v[i];
      mp[p]->v[i] = (1.0 - alpha) * mp[p]->v[i] + sp[p]->v[i];
    }
}

inline double max_abs_diff(const MemoryMLP& a, RefMemory& b) {
  const auto ta = a.tensors();
  const auto pb = b.parts();
  double m = 0;
  for (std::size_t p = 0; p < ta.size(); ++p) m = std::max(m, max_abs_diff(ta[p].data(), pb[p]->v));
  return m;
}

// ---- metrics ---------------------------------------------------------------

inline BinaryMask random_mask(std::mt19937_64& rng, std::size_t h, std::size_t w, double density) {
  std::bernoulli_distribution b(density);
  std::vector<std::uint8_t> px(h * w);
  for (auto& p : px) p = b(rng) ? 1 : 0;
  return BinaryMask(h, w, std::move(px));
}

// Blobby mask: a union of random rectangles, so boundaries are non-trivial.
inline BinaryMask random_blobs(std::mt19937_64& rng, std::size_t h, std::size_t w, int count) {
  std::vector<std::uint8_t> px(h * w, 0);
  for (int i = 0; i < count; ++i) {
    const std::size_t r0 = rng() % h, c0 = rng() % w;
    const std::size_t r1 = std::min(h, r0 + 1 + rng() % std::max<std::size_t>(1, h / 2));
    const std::size_t c1 = std::min(w, c0 + 1 + rng() % std::max<std::size_t>(1, w / 2));
    for (std::size_t r = r0; r < r1; ++r)
      for (std::size_t c = c0; c < c1; ++c) px[r * w + c] = 1;
  }
  return BinaryMask(h, w, std::move(px));
}

struct RefCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

inline RefCounts ref_confusion(const BinaryMask& p, const BinaryMask& g) {
  RefCounts c;
  for (std::size_t i = 0; i < p.pixels.size(); ++i) {
    const bool a = p.pixels[i], b = g.pixels[i];
    if (a && b) ++c.tp;
    else if (a) ++c.fp;
    else if (b) ++c.fn;
    else ++c.tn;
  }
  return c;
}

inline std::vector<std::pair<int, int>> ref_boundary(const BinaryMask& m) {
  std::vector<std::pair<int, int>> out;
  const int h = static_cast<int>(m.height), w = static_cast<int>(m.width);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      if (!m.at(r, c)) continue;
      bool edge = r == 0 || c == 0 || r == h - 1 || c == w - 1;
      if (!edge) edge = !m.at(r - 1, c) || !m.at(r + 1, c) || !m.at(r, c - 1) || !m.at(r, c + 1);
      if (edge) out.emplace_back(r, c);
    }
  return out;
}

inline double ref_min_dist2(int r, int c, const std::vector<std::pair<int, int>>& set) {
  double best = std::numeric_limits<double>::infinity();
  for (auto [a, b] : set) best = std::min(best, double((a - r) * (a - r) + (b - c) * (b - c)));
  return best;
}

inline double ref_boundary_f1(const BinaryMask& p, const BinaryMask& g, double tau) {
  const auto bp = ref_boundary(p), bg = ref_boundary(g);
  if (bp.empty() && bg.empty()) return 1.0;
  if (bp.empty() || bg.empty()) return 0.0;
  std::size_t hit_p = 0, hit_g = 0;
  for (auto [r, c] : bp) hit_p += ref_min_dist2(r, c, bg) <= tau * tau;
  for (auto [r, c] : bg) hit_g += ref_min_dist2(r, c, bp) <= tau * tau;
  const double prec = double(hit_p) / bp.size(), rec = double(hit_g) / bg.size();
  return prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
}

inline double ref_hausdorff(const BinaryMask& p, const BinaryMask& g) {
  const auto bp = ref_boundary(p), bg = ref_boundary(g);
  if (bp.empty() && bg.empty()) return 0.0;
  if (bp.empty() || bg.empty()) return std::numeric_limits<double>::infinity();
  double d = 0;
  for (auto [r, c] : bp) d = std::max(d, ref_min_dist2(r, c, bg));
  for (auto [r, c] : bg) d = std::max(d, ref_min_dist2(r, c, bp));
  return std::sqrt(d);
}

struct RefTrimap {
  double value = 0;
  bool degenerate = false;
};

inline RefTrimap ref_trimap(const BinaryMask& p, const BinaryMask& g, double width) {
  const auto bg = ref_boundary(g);
  RefCounts c;
  std::size_t band = 0;
  for (std::size_t r = 0; r < g.height; ++r)
    for (std::size_t col = 0; col < g.width; ++col) {
      if (bg.empty() || ref_min_dist2(int(r), int(col), bg) > width * width) continue;
      ++band;
      const bool a = p.at(r, col), b = g.at(r, col);
      if (a && b) ++c.tp;
      else if (a) ++c.fp;
      else if (b) ++c.fn;
      else ++c.tn;
    }
  if (band == 0) return {ref_boundary(p).empty() ? 1.0 : 0.0, true};
  auto iou = [](std::uint64_t hit, std::uint64_t miss) { return hit + miss == 0 ? 1.0 : double(hit) / (hit + miss); };
  return {0.5 * (iou(c.tp, c.fp + c.fn) + iou(c.tn, c.fp + c.fn)), false};
}

}  // namespace ctitans::testing

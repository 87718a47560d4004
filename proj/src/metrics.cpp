#include "changetitans/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace ctitans {

BinaryMask::BinaryMask(std::size_t h, std::size_t w, std::vector<std::uint8_t> px)
    : height(h), width(w), pixels(std::move(px)) {
  if (pixels.size() != h * w) throw std::invalid_argument("mask: pixel count does not match extents");
  for (auto v : pixels)
    if (v > 1) throw std::invalid_argument("mask: non-binary value " + std::to_string(v));
}

namespace {

void check_pair(const BinaryMask& a, const BinaryMask& b) {
  if (a.height != b.height || a.width != b.width)
    throw std::invalid_argument("metrics: mask extents differ (" + std::to_string(a.height) + "x" +
                                std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                                std::to_string(b.width) + ")");
  for (auto v : a.pixels)
    if (v > 1) throw std::invalid_argument("metrics: non-binary prediction value");
  for (auto v : b.pixels)
    if (v > 1) throw std::invalid_argument("metrics: non-binary ground-truth value");
}

bool empty(const BinaryMask& m) {
  return std::none_of(m.pixels.begin(), m.pixels.end(), [](auto v) { return v != 0; });
}

double ratio(double num, double den, bool& degenerate) {
  if (den == 0) {
    degenerate = true;
    return 0.0;
  }
  return num / den;
}

// 1-D lower envelope of parabolas (Felzenszwalb & Huttenlocher); f is
// overwritten with the transformed values. Infinite samples are skipped.
void edt_1d(std::vector<double>& f, std::size_t n, std::vector<double>& d, std::vector<std::size_t>& v,
            std::vector<double>& z) {
  const double inf = std::numeric_limits<double>::infinity();
  auto cross = [&](std::size_t q, std::size_t p) {
    const double dq = static_cast<double>(q), dp = static_cast<double>(p);
    return ((f[q] + dq * dq) - (f[p] + dp * dp)) / (2.0 * (dq - dp));
  };
  std::size_t k = 0;
  bool any = false;
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    if (!any) {
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      any = true;
      continue;
    }
    double s = cross(q, v[k]);
    while (s <= z[k]) {
      --k;
      s = cross(q, v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  if (!any) return;
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const double dq = static_cast<double>(q) - static_cast<double>(v[k]);
    d[q] = dq * dq + f[v[k]];
  }
  for (std::size_t q = 0; q < n; ++q) f[q] = d[q];
}

}  // namespace

ConfusionCounts confusion(const BinaryMask& pred, const BinaryMask& gt) {
  check_pair(pred, gt);
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.pixels.size(); ++i) {
    const bool p = pred.pixels[i] != 0, g = gt.pixels[i] != 0;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

PixelMetrics pixel_metrics(const ConfusionCounts& c) {
  PixelMetrics m;
  if (c.tp + c.fp + c.fn == 0) {
    m.precision = m.recall = m.f1 = m.iou = 1.0;
    m.degenerate = true;
    return m;
  }
  const auto tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp),
             fn = static_cast<double>(c.fn);
  m.precision = ratio(tp, tp + fp, m.degenerate);
  m.recall = ratio(tp, tp + fn, m.degenerate);
  m.f1 = ratio(2 * m.precision * m.recall, m.precision + m.recall, m.degenerate);
  m.iou = tp / (tp + fp + fn);
  return m;
}

BinaryMask boundary(const BinaryMask& mask) {
  BinaryMask b = BinaryMask::zeros(mask.height, mask.width);
  const std::size_t H = mask.height, W = mask.width;
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      if (!mask.at(r, c)) continue;
      const bool edge = r == 0 || c == 0 || r + 1 == H || c + 1 == W || !mask.at(r - 1, c) ||
                        !mask.at(r + 1, c) || !mask.at(r, c - 1) || !mask.at(r, c + 1);
      if (edge) b.pixels[r * W + c] = 1;
    }
  return b;
}

std::vector<double> squared_distance_transform(const BinaryMask& features) {
  const std::size_t H = features.height, W = features.width;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> g(H * W);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = features.pixels[i] ? 0.0 : inf;
  const std::size_t n = std::max(H, W);
  std::vector<double> f(n), d(n), z(n + 1);
  std::vector<std::size_t> v(n);
  for (std::size_t c = 0; c < W; ++c) {
    for (std::size_t r = 0; r < H; ++r) f[r] = g[r * W + c];
    edt_1d(f, H, d, v, z);
    for (std::size_t r = 0; r < H; ++r) g[r * W + c] = f[r];
  }
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t c = 0; c < W; ++c) f[c] = g[r * W + c];
    edt_1d(f, W, d, v, z);
    for (std::size_t c = 0; c < W; ++c) g[r * W + c] = f[c];
  }
  return g;
}

double boundary_f1(const BinaryMask& pred, const BinaryMask& gt, double tau) {
  check_pair(pred, gt);
  if (tau < 0) throw std::invalid_argument("boundary_f1: tolerance must be >= 0");
  const auto bp = boundary(pred), bg = boundary(gt);
  const bool ep = empty(bp), eg = empty(bg);
  if (ep && eg) return 1.0;
  if (ep || eg) return 0.0;
  const auto dg = squared_distance_transform(bg);
  const auto dp = squared_distance_transform(bp);
  const double t2 = tau * tau;
  std::size_t np = 0, mp = 0, ng = 0, mg = 0;
  for (std::size_t i = 0; i < bp.pixels.size(); ++i) {
    if (bp.pixels[i]) {
      ++np;
      if (dg[i] <= t2) ++mp;
    }
    if (bg.pixels[i]) {
      ++ng;
      if (dp[i] <= t2) ++mg;
    }
  }
  const double P = static_cast<double>(mp) / static_cast<double>(np);
  const double R = static_cast<double>(mg) / static_cast<double>(ng);
  return P + R > 0 ? 2 * P * R / (P + R) : 0.0;
}

TrimapScore trimap_miou(const BinaryMask& pred, const BinaryMask& gt, double width) {
  check_pair(pred, gt);
  if (width < 1) throw std::invalid_argument("trimap_miou: band width must be >= 1");
  const auto bg = boundary(gt);
  TrimapScore s;
  if (empty(bg)) {
    s.degenerate = true;
    s.value = empty(boundary(pred)) ? 1.0 : 0.0;
    return s;
  }
  const auto d = squared_distance_transform(bg);
  const double w2 = width * width;
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d[i] > w2) continue;
    const bool p = pred.pixels[i] != 0, g = gt.pixels[i] != 0;
    if (p && g) ++tp;
    else if (p) ++fp;
    else if (g) ++fn;
    else ++tn;
  }
  auto iou = [](std::uint64_t hit, std::uint64_t miss) {
    return hit + miss == 0 ? 1.0 : static_cast<double>(hit) / static_cast<double>(hit + miss);
  };
  s.value = 0.5 * (iou(tp, fp + fn) + iou(tn, fp + fn));
  return s;
}

double hausdorff(const BinaryMask& pred, const BinaryMask& gt) {
  check_pair(pred, gt);
  const auto bp = boundary(pred), bg = boundary(gt);
  const bool ep = empty(bp), eg = empty(bg);
  if (ep && eg) return 0.0;
  if (ep || eg) return kInfiniteDistance;
  const auto dg = squared_distance_transform(bg);
  const auto dp = squared_distance_transform(bp);
  double worst = 0;
  for (std::size_t i = 0; i < bp.pixels.size(); ++i) {
    if (bp.pixels[i]) worst = std::max(worst, dg[i]);
    if (bg.pixels[i]) worst = std::max(worst, dp[i]);
  }
  return std::sqrt(worst);
}

MetricReport evaluate(const BinaryMask& pred, const BinaryMask& gt, double tau, double trimap_width) {
  const auto pm = pixel_metrics(confusion(pred, gt));
  MetricReport r;
  r.precision = pm.precision;
  r.recall = pm.recall;
  r.f1 = pm.f1;
  r.iou = pm.iou;
  r.bf1 = boundary_f1(pred, gt, tau);
  const auto tm = trimap_miou(pred, gt, trimap_width);
  r.trimap_miou = tm.value;
  r.hausdorff = hausdorff(pred, gt);
  r.tau = tau;
  r.trimap_width = trimap_width;
  r.degenerate = pm.degenerate || tm.degenerate;
  return r;
}

namespace {

std::string fmt(double v) {
  if (std::isinf(v)) return "inf";
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

}  // namespace

std::string report_text(const MetricReport& r) {
  std::ostringstream os;
  os << "precision=" << fmt(r.precision) << '\n'
     << "recall=" << fmt(r.recall) << '\n'
     << "f1=" << fmt(r.f1) << '\n'
     << "iou=" << fmt(r.iou) << '\n'
     << "bf1=" << fmt(r.bf1) << '\n'
     << "trimap_miou=" << fmt(r.trimap_miou) << '\n'
     << "hausdorff=" << fmt(r.hausdorff) << '\n'
     << "tau=" << fmt(r.tau) << '\n'
     << "trimap_width=" << fmt(r.trimap_width) << '\n'
     << "degenerate=" << (r.degenerate ? 1 : 0) << '\n';
  return os.str();
}

std::string report_csv_header() {
  return "# changetitans metrics csv v1\n"
         "id,precision,recall,f1,iou,bf1,trimap_miou,hausdorff,tau,trimap_width,degenerate\n";
}

std::string report_csv_row(const std::string& id, const MetricReport& r) {
  std::ostringstream os;
  os << id << ',' << fmt(r.precision) << ',' << fmt(r.recall) << ',' << fmt(r.f1) << ','
     << fmt(r.iou) << ',' << fmt(r.bf1) << ',' << fmt(r.trimap_miou) << ',' << fmt(r.hausdorff)
     << ',' << fmt(r.tau) << ',' << fmt(r.trimap_width) << ',' << (r.degenerate ? 1 : 0) << '\n';
  return os.str();
}

}  // namespace ctitans

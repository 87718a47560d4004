#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

namespace ctitans {

/// Row-major binary mask; every pixel is 0 or 1.
struct BinaryMask {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> pixels;

  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w, std::vector<std::uint8_t> px);
  static BinaryMask zeros(std::size_t h, std::size_t w) {
    return BinaryMask(h, w, std::vector<std::uint8_t>(h * w, 0));
  }
  std::uint8_t at(std::size_t r, std::size_t c) const { return pixels[r * width + c]; }
  bool operator==(const BinaryMask&) const = default;
};

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
  std::uint64_t total() const { return tp + fp + fn + tn; }
  bool operator==(const ConfusionCounts&) const = default;
};

struct PixelMetrics {
  double precision = 0, recall = 0, f1 = 0, iou = 0;
  /// Some ratio was 0/0. When nothing is positive in either mask all four
  /// are reported as 1; otherwise an undefined ratio is reported as 0.
  bool degenerate = false;
};

inline constexpr double kInfiniteDistance = std::numeric_limits<double>::infinity();

struct MetricReport {
  double precision = 0, recall = 0, f1 = 0, iou = 0;
  double bf1 = 0;
  double trimap_miou = 0;
  double hausdorff = 0;  // pixels; kInfiniteDistance when exactly one boundary set is empty
  double tau = 2;
  double trimap_width = 3;
  bool degenerate = false;
};

ConfusionCounts confusion(const BinaryMask& pred, const BinaryMask& gt);
PixelMetrics pixel_metrics(const ConfusionCounts& counts);

/// Mask pixels with a 4-neighbour outside the mask or on the image border.
BinaryMask boundary(const BinaryMask& mask);

/// Exact squared Euclidean distance from each pixel to the nearest set pixel
/// of `features` (infinity when `features` is empty).
std::vector<double> squared_distance_transform(const BinaryMask& features);

/// F1 of boundary precision/recall, where a boundary pixel matches when a
/// boundary pixel of the other mask lies within Euclidean distance tau.
/// Both boundaries empty counts as a perfect match.
double boundary_f1(const BinaryMask& pred, const BinaryMask& gt, double tau);

struct TrimapScore {
  double value = 0;
  bool degenerate = false;  // empty band
};
/// Mean of change-IoU and background-IoU over pixels within Euclidean
/// distance `width` of the ground-truth boundary. A class absent from both
/// masks inside the band scores 1. An empty band is degenerate and scores 1
/// if the prediction has no boundary either, else 0.
TrimapScore trimap_miou(const BinaryMask& pred, const BinaryMask& gt, double width);

/// Symmetric Hausdorff distance between boundary pixel sets. 0 when both
/// sets are empty, kInfiniteDistance when exactly one is.
double hausdorff(const BinaryMask& pred, const BinaryMask& gt);

MetricReport evaluate(const BinaryMask& pred, const BinaryMask& gt, double tau = 2.0,
                      double trimap_width = 3.0);

/// key=value lines.
std::string report_text(const MetricReport& r);
/// Versioned comment line plus column header for per-pair CSV output.
std::string report_csv_header();
std::string report_csv_row(const std::string& id, const MetricReport& r);

}  // namespace ctitans

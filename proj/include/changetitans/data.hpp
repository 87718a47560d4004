#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "changetitans/tensor.hpp"

namespace ctitans {

struct SamplePair {
  Tensor image_t1;  // [C,H,W] in [0,1]
  Tensor image_t2;
  Tensor mask;      // [H,W] of 0/1
  std::string id;

  /// Throws when extents disagree or the mask is not binary.
  void validate() const;
};

/// One synthetic change object. Rectangles cover rows [r0, r1) and columns
/// [c0, c1); discs cover pixels whose centre (r + 0.5, c + 0.5) lies within
/// `radius` of (cy, cx).
struct SynthObject {
  enum class Kind { Rect, Disc } kind = Kind::Rect;
  std::size_t r0 = 0, c0 = 0, r1 = 0, c1 = 0;
  double cy = 0, cx = 0, radius = 0;
  /// Present in frame 2 only (inserted) or frame 1 only (deleted).
  bool inserted = true;
  std::array<double, 3> colour{};

  bool covers(std::size_t r, std::size_t c) const;
};

/// The objects synth_pair(seed, size, n) places.
std::vector<SynthObject> synth_objects(std::uint64_t seed, std::size_t size, std::size_t n_objects);

/// Textured background shared by both frames, objects inserted into or
/// deleted from frame 2, per-channel gain/offset jitter on frame 2. The mask
/// is the union of the object footprints. Pixel values are multiples of 1/255
/// so the pair survives an 8-bit round trip unchanged.
SamplePair synth_pair(std::uint64_t seed, std::size_t size, std::size_t n_objects,
                      std::size_t channels = 3);

/// n pairs with ids "0000".."n-1", seeds derived from `seed`.
std::vector<SamplePair> synth_dataset(std::uint64_t seed, std::size_t n, std::size_t size,
                                      std::size_t max_objects = 3, std::size_t channels = 3);

/// Applies one of the eight flip/rotation symmetries (0 = identity) to
/// both frames and the mask.
SamplePair dihedral(const SamplePair& s, unsigned which);

/// Layout: A/<id>.ppm, B/<id>.ppm, label/<id>.pgm (0 or 255). Grey images
/// use .pgm under A and B.
void save_dataset(const std::filesystem::path& dir, const std::vector<SamplePair>& pairs);
std::vector<SamplePair> load_dataset(const std::filesystem::path& dir);

/// Binary mask image (0 or 255 -> 0/1); any other value is an error.
Tensor load_mask(const std::filesystem::path& path);
void save_mask(const std::filesystem::path& path, const std::vector<std::uint8_t>& mask,
               std::size_t height, std::size_t width);

}  // namespace ctitans

#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "changetitans/tensor.hpp"

namespace ctitans {

/// 8-bit raster, interleaved channels (1 for PGM, 3 for PPM).
struct Raster {
  std::size_t height = 0, width = 0, channels = 1;
  std::vector<std::uint8_t> pixels;
};

/// Reads binary P5 (grey) or P6 (RGB) files with maxval 255.
Raster read_pnm(const std::filesystem::path& path);
/// Writes P5 for one channel, P6 for three.
void write_pnm(const std::filesystem::path& path, const Raster& r);

/// [C,H,W] in [0,1] (values are rounded to the nearest of 256 levels).
Raster to_raster(const Tensor& image);
Tensor to_tensor(const Raster& r);

}  // namespace ctitans

#include "changetitans/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include "changetitans/serialize.hpp"

namespace ctitans {

namespace {

// Next header token, skipping whitespace and '#' comments.
std::string token(std::istream& is) {
  std::string t;
  char ch;
  while (is.get(ch)) {
    if (ch == '#') {
      std::string line;
      std::getline(is, line);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!t.empty()) return t;
      continue;
    }
    t.push_back(ch);
  }
  return t;
}

std::size_t header_number(std::istream& is, const std::filesystem::path& path) {
  const auto t = token(is);
  if (t.empty() || !std::all_of(t.begin(), t.end(), [](char c) { return c >= '0' && c <= '9'; }))
    throw FormatError(path.string() + ": malformed PNM header");
  return std::stoul(t);
}

}  // namespace

Raster read_pnm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  const auto magic = token(is);
  Raster r;
  if (magic == "P5") r.channels = 1;
  else if (magic == "P6") r.channels = 3;
  else throw FormatError(path.string() + ": only binary P5/P6 files are supported");
  r.width = header_number(is, path);
  r.height = header_number(is, path);
  const auto maxval = header_number(is, path);
  if (maxval != 255) throw FormatError(path.string() + ": maxval must be 255");
  if (r.width == 0 || r.height == 0) throw FormatError(path.string() + ": empty image");
  // token() consumed exactly one whitespace byte after maxval.
  r.pixels.resize(r.width * r.height * r.channels);
  is.read(reinterpret_cast<char*>(r.pixels.data()), static_cast<std::streamsize>(r.pixels.size()));
  if (is.gcount() != static_cast<std::streamsize>(r.pixels.size()))
    throw FormatError(path.string() + ": truncated pixel data");
  return r;
}

void write_pnm(const std::filesystem::path& path, const Raster& r) {
  if (r.channels != 1 && r.channels != 3) throw FormatError("PNM needs 1 or 3 channels");
  if (r.pixels.size() != r.width * r.height * r.channels) throw FormatError("raster size mismatch");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path.string());
  os << (r.channels == 1 ? "P5" : "P6") << '\n' << r.width << ' ' << r.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(r.pixels.data()), static_cast<std::streamsize>(r.pixels.size()));
}

Raster to_raster(const Tensor& image) {
  if (image.rank() != 3) throw ShapeError("to_raster: expected [C,H,W], got " + to_string(image.shape()));
  Raster r;
  r.channels = image.dim(0);
  r.height = image.dim(1);
  r.width = image.dim(2);
  r.pixels.resize(image.numel());
  const auto d = image.data();
  const std::size_t plane = r.height * r.width;
  for (std::size_t c = 0; c < r.channels; ++c)
    for (std::size_t i = 0; i < plane; ++i) {
      const double v = std::clamp(d[c * plane + i], 0.0, 1.0);
      r.pixels[i * r.channels + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  return r;
}

Tensor to_tensor(const Raster& r) {
  const std::size_t plane = r.height * r.width;
  std::vector<Scalar> v(r.channels * plane);
  for (std::size_t c = 0; c < r.channels; ++c)
    for (std::size_t i = 0; i < plane; ++i) v[c * plane + i] = r.pixels[i * r.channels + c] / 255.0;
  return Tensor({r.channels, r.height, r.width}, std::move(v));
}

}  // namespace ctitans

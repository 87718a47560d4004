#include "changetitans/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "changetitans/image_io.hpp"
#include "changetitans/serialize.hpp"

namespace ctitans {

void SamplePair::validate() const {
  if (image_t1.rank() != 3 || image_t1.shape() != image_t2.shape())
    throw ShapeError("pair " + id + ": frames " + to_string(image_t1.shape()) + " and " +
                     to_string(image_t2.shape()) + " must be equal [C,H,W]");
  if (mask.rank() != 2 || mask.dim(0) != image_t1.dim(1) || mask.dim(1) != image_t1.dim(2))
    throw ShapeError("pair " + id + ": mask " + to_string(mask.shape()) + " does not match frames " +
                     to_string(image_t1.shape()));
  for (auto v : mask.data())
    if (v != 0.0 && v != 1.0) throw std::invalid_argument("pair " + id + ": mask is not binary");
}

bool SynthObject::covers(std::size_t r, std::size_t c) const {
  if (kind == Kind::Rect) return r >= r0 && r < r1 && c >= c0 && c < c1;
  const double dy = static_cast<double>(r) + 0.5 - cy, dx = static_cast<double>(c) + 0.5 - cx;
  return dy * dy + dx * dx <= radius * radius;
}

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

}  // namespace

std::vector<SynthObject> synth_objects(std::uint64_t seed, std::size_t size, std::size_t n_objects) {
  if (size < 32 || size % 32 != 0)
    throw std::invalid_argument("synth: size must be >= 32 and divisible by 32");
  std::mt19937_64 eng(splitmix(seed ^ 0x6f626a65637473ull));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double S = static_cast<double>(size);
  std::vector<SynthObject> out;
  for (std::size_t i = 0; i < n_objects; ++i) {
    SynthObject o;
    o.kind = u(eng) < 0.5 ? SynthObject::Kind::Rect : SynthObject::Kind::Disc;
    o.inserted = u(eng) < 0.6;
    for (auto& ch : o.colour) ch = u(eng) < 0.5 ? 0.05 + 0.2 * u(eng) : 0.75 + 0.2 * u(eng);
    const double lo = S / 8, hi = S / 4;
    if (o.kind == SynthObject::Kind::Rect) {
      const auto h = static_cast<std::size_t>(lo + (hi - lo) * u(eng));
      const auto w = static_cast<std::size_t>(lo + (hi - lo) * u(eng));
      o.r0 = static_cast<std::size_t>((S - h) * u(eng));
      o.c0 = static_cast<std::size_t>((S - w) * u(eng));
      o.r1 = o.r0 + h;
      o.c1 = o.c0 + w;
    } else {
      o.radius = 0.5 * (lo + (hi - lo) * u(eng));
      o.cy = o.radius + (S - 2 * o.radius) * u(eng);
      o.cx = o.radius + (S - 2 * o.radius) * u(eng);
    }
    out.push_back(o);
  }
  return out;
}

SamplePair synth_pair(std::uint64_t seed, std::size_t size, std::size_t n_objects, std::size_t channels) {
  if (channels == 0) throw std::invalid_argument("synth: need at least one channel");
  const auto objects = synth_objects(seed, size, n_objects);
  std::mt19937_64 eng(splitmix(seed));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t H = size, W = size, plane = H * W;

  std::vector<double> bg(channels * plane);
  for (std::size_t c = 0; c < channels; ++c) {
    const double base = 0.35 + 0.3 * u(eng);
    struct Wave { double fy, fx, phase, amp; };
    std::array<Wave, 3> waves;
    for (auto& w : waves)
      w = {(1 + 3 * u(eng)) / static_cast<double>(size), (1 + 3 * u(eng)) / static_cast<double>(size),
           2 * std::numbers::pi * u(eng), 0.04 + 0.06 * u(eng)};
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t x = 0; x < W; ++x) {
        double v = base;
        for (const auto& w : waves)
          v += w.amp * std::sin(2 * std::numbers::pi * (w.fy * r + w.fx * x) + w.phase);
        v += 0.03 * (u(eng) - 0.5);
        bg[c * plane + r * W + x] = v;
      }
  }

  std::vector<double> a = bg, b = bg;
  std::vector<Scalar> mask(plane, 0.0);
  for (const auto& o : objects) {
    auto& frame = o.inserted ? b : a;
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t x = 0; x < W; ++x) {
        if (!o.covers(r, x)) continue;
        mask[r * W + x] = 1.0;
        for (std::size_t c = 0; c < channels; ++c) frame[c * plane + r * W + x] = o.colour[c % 3];
      }
  }
  for (std::size_t c = 0; c < channels; ++c) {
    const double gain = 0.92 + 0.16 * u(eng), offset = 0.08 * (u(eng) - 0.5);
    for (std::size_t i = 0; i < plane; ++i) {
      a[c * plane + i] = quantize(a[c * plane + i]);
      b[c * plane + i] = quantize(gain * b[c * plane + i] + offset);
    }
  }
  SamplePair s;
  s.image_t1 = Tensor({channels, H, W}, std::move(a));
  s.image_t2 = Tensor({channels, H, W}, std::move(b));
  s.mask = Tensor({H, W}, std::move(mask));
  return s;
}

std::vector<SamplePair> synth_dataset(std::uint64_t seed, std::size_t n, std::size_t size,
                                      std::size_t max_objects, std::size_t channels) {
  std::vector<SamplePair> out;
  std::mt19937_64 eng(splitmix(seed ^ 0x64617461ull));
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t s = eng();
    const std::size_t objects = max_objects == 0 ? 0 : 1 + static_cast<std::size_t>(eng() % max_objects);
    auto p = synth_pair(s, size, objects, channels);
    std::string id = std::to_string(i);
    p.id = std::string(id.size() < 4 ? 4 - id.size() : 0, '0') + id;
    out.push_back(std::move(p));
  }
  return out;
}

namespace {

// Source pixel of output (r, c) under symmetry `which` for an n x n grid
// (rotation by 90 degrees `which % 4` times, then a horizontal flip when
// which >= 4).
std::pair<std::size_t, std::size_t> dihedral_source(std::size_t r, std::size_t c, std::size_t H,
                                                    std::size_t W, unsigned which) {
  if (which >= 4) c = W - 1 - c;
  switch (which % 4) {
    case 0: return {r, c};
    case 1: return {c, W - 1 - r};
    case 2: return {H - 1 - r, W - 1 - c};
    default: return {H - 1 - c, r};
  }
}

Tensor apply_dihedral(const Tensor& t, unsigned which) {
  const bool map = t.rank() == 2;
  const std::size_t C = map ? 1 : t.dim(0), H = t.dim(map ? 0 : 1), W = t.dim(map ? 1 : 2);
  if (which % 2 == 1 && H != W) throw ShapeError("dihedral: rotations need square images");
  std::vector<Scalar> out(t.numel());
  const auto d = t.data();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t x = 0; x < W; ++x) {
        const auto [sr, sc] = dihedral_source(r, x, H, W, which);
        out[c * H * W + r * W + x] = d[c * H * W + sr * W + sc];
      }
  return Tensor(t.shape(), std::move(out));
}

}  // namespace

SamplePair dihedral(const SamplePair& s, unsigned which) {
  if (which >= 8) throw std::invalid_argument("dihedral: symmetry index must be < 8");
  if (which == 0) return s;
  SamplePair out = s;
  out.image_t1 = apply_dihedral(s.image_t1, which);
  out.image_t2 = apply_dihedral(s.image_t2, which);
  out.mask = apply_dihedral(s.mask, which);
  return out;
}

Tensor load_mask(const std::filesystem::path& path) {
  const auto r = read_pnm(path);
  if (r.channels != 1) throw FormatError(path.string() + ": mask must be a grey (P5) image");
  std::vector<Scalar> v(r.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (r.pixels[i] != 0 && r.pixels[i] != 255)
      throw FormatError(path.string() + ": mask values must be 0 or 255");
    v[i] = r.pixels[i] ? 1.0 : 0.0;
  }
  return Tensor({r.height, r.width}, std::move(v));
}

void save_mask(const std::filesystem::path& path, const std::vector<std::uint8_t>& mask,
               std::size_t height, std::size_t width) {
  Raster r;
  r.height = height;
  r.width = width;
  r.channels = 1;
  r.pixels.resize(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) r.pixels[i] = mask[i] ? 255 : 0;
  write_pnm(path, r);
}

void save_dataset(const std::filesystem::path& dir, const std::vector<SamplePair>& pairs) {
  namespace fs = std::filesystem;
  for (const char* sub : {"A", "B", "label"}) fs::create_directories(dir / sub);
  for (const auto& p : pairs) {
    p.validate();
    const std::string ext = p.image_t1.dim(0) == 1 ? ".pgm" : ".ppm";
    write_pnm(dir / "A" / (p.id + ext), to_raster(p.image_t1));
    write_pnm(dir / "B" / (p.id + ext), to_raster(p.image_t2));
    std::vector<std::uint8_t> m(p.mask.numel());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = p.mask[i] != 0 ? 1 : 0;
    save_mask(dir / "label" / (p.id + ".pgm"), m, p.mask.dim(0), p.mask.dim(1));
  }
}

std::vector<SamplePair> load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir / "A") || !fs::is_directory(dir / "B") || !fs::is_directory(dir / "label"))
    throw FormatError(dir.string() + ": expected A/, B/ and label/ subdirectories");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir / "A"))
    if (e.is_regular_file() && (e.path().extension() == ".ppm" || e.path().extension() == ".pgm"))
      files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<SamplePair> out;
  for (const auto& f : files) {
    SamplePair p;
    p.id = f.stem().string();
    p.image_t1 = to_tensor(read_pnm(f));
    const auto other = dir / "B" / f.filename();
    if (!fs::exists(other)) throw FormatError(other.string() + ": missing second frame");
    p.image_t2 = to_tensor(read_pnm(other));
    p.mask = load_mask(dir / "label" / (p.id + ".pgm"));
    p.validate();
    out.push_back(std::move(p));
  }
  if (out.empty()) throw FormatError(dir.string() + ": no image pairs found");
  return out;
}

}  // namespace ctitans

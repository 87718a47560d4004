#include "changetitans/serialize.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace ctitans {

namespace {

constexpr std::array<char, 4> kMagic{'T', 'C', 'D', 'T'};

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFFu);
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("truncated tensor header");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

void put_f64(std::ostream& os, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xFFu);
  os.write(reinterpret_cast<const char*>(b), 8);
}

double get_f64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw FormatError("truncated tensor payload");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kMagic.data(), 4);
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) put_u32(os, static_cast<std::uint32_t>(e));
  for (auto v : t.data()) put_f64(os, v);
}

Tensor read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4)) throw FormatError("missing tensor magic");
  if (magic != kMagic) throw FormatError("bad tensor magic");
  const std::uint32_t rank = get_u32(is);
  if (rank > 16) throw FormatError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) {
    e = get_u32(is);
    if (e == 0) throw FormatError("zero extent in tensor header");
  }
  std::vector<Scalar> values(numel(shape));
  for (auto& v : values) v = get_f64(is);
  return Tensor(std::move(shape), std::move(values));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  save_tensors(path, {t});
}

Tensor load_tensor(const std::filesystem::path& path) {
  auto ts = load_tensors(path);
  if (ts.size() != 1) throw FormatError(path.string() + ": expected exactly one tensor");
  return ts.front();
}

void save_tensors(const std::filesystem::path& path, const std::vector<Tensor>& ts) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  for (const auto& t : ts) write_tensor(os, t);
  if (!os) throw FormatError("write failed: " + path.string());
}

std::vector<Tensor> load_tensors(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  std::vector<Tensor> out;
  while (is.peek() != std::char_traits<char>::eof()) out.push_back(read_tensor(is));
  return out;
}

std::string ascii_dump(const Tensor& t) {
  std::ostringstream os;
  os << "tensor " << to_string(t.shape()) << '\n';
  os << std::setprecision(std::numeric_limits<Scalar>::max_digits10);
  const std::size_t row = t.rank() == 0 ? 1 : t.dim(t.rank() - 1);
  const auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    os << d[i];
    os << ((i + 1) % row == 0 ? '\n' : ' ');
  }
  return os.str();
}

void save_named_tensors(const std::filesystem::path& file, const NamedTensors& tensors) {
  std::vector<Tensor> ts;
  std::ofstream manifest(file.string() + ".manifest");
  if (!manifest) throw FormatError("cannot write manifest for " + file.string());
  manifest << "# changetitans tensor manifest v1\n";
  for (const auto& [name, t] : tensors) {
    if (name.empty() || name.find_first_of(" \t\n") != std::string::npos)
      throw FormatError("invalid tensor name '" + name + "'");
    manifest << name << '\n';
    ts.push_back(t);
  }
  save_tensors(file, ts);
}

NamedTensors load_named_tensors(const std::filesystem::path& file) {
  std::ifstream manifest(file.string() + ".manifest");
  if (!manifest) throw FormatError("missing manifest for " + file.string());
  std::vector<std::string> names;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty() || line[0] == '#') continue;
    names.push_back(line);
  }
  auto ts = load_tensors(file);
  if (ts.size() != names.size())
    throw FormatError(file.string() + ": manifest lists " + std::to_string(names.size()) +
                      " tensors, container holds " + std::to_string(ts.size()));
  NamedTensors out;
  for (std::size_t i = 0; i < ts.size(); ++i) out.emplace_back(names[i], ts[i]);
  return out;
}

}  // namespace ctitans

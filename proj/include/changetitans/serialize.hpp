#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "changetitans/tensor.hpp"

namespace ctitans {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor container record: "TCDT", u32 rank, rank x u32 extents, then
// little-endian IEEE-754 binary64 values in row-major order.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

/// Several records back to back in one file.
void save_tensors(const std::filesystem::path& path, const std::vector<Tensor>& ts);
std::vector<Tensor> load_tensors(const std::filesystem::path& path);

/// Human-readable dump: header line with the shape, then one row per line
/// over the last axis, values printed with round-trip precision.
std::string ascii_dump(const Tensor& t);

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Writes the tensors to `file` and their names, one per line in the same
/// order, to `file` + ".manifest".
void save_named_tensors(const std::filesystem::path& file, const NamedTensors& tensors);
NamedTensors load_named_tensors(const std::filesystem::path& file);

}  // namespace ctitans

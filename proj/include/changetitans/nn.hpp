#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "changetitans/ops.hpp"

namespace ctitans {

/// Named learnable tensors in registration order.
using ParamList = std::vector<std::pair<std::string, Tensor>>;

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

/// Seeded source for parameter initialization.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Tensor normal(Shape shape, Scalar stddev);
  Tensor uniform(Shape shape, Scalar lo, Scalar hi);
  Scalar uniform01() { return std::uniform_real_distribution<Scalar>(0.0, 1.0)(engine_); }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

/// Learnable leaf with gradient tracking enabled.
Tensor param(Tensor t);

/// y = x W + b over the last axis; W is [in, out].
struct Linear {
  Tensor weight;
  Tensor bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true);
  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
  /// Zeroes the weight and bias (used for residual-branch outputs).
  void zero();
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
  void collect(const std::string& prefix, ParamList& out) const;
};

struct Conv2d {
  Tensor weight;
  Tensor bias;
  std::size_t stride = 1;
  std::size_t padding = 0;
  PadMode mode = PadMode::Zero;
  bool depthwise = false;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t k, Rng& rng, std::size_t padding,
         bool with_bias = true);
  static Conv2d make_depthwise(std::size_t channels, std::size_t k, Rng& rng,
                               std::size_t padding);
  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

/// Multi-head scaled dot-product attention. Queries come from one token set,
/// keys and values from another.
struct MultiHeadAttention {
  Linear q, k, v, o;
  std::size_t heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t dim, std::size_t heads, Rng& rng);
  /// queries [n,C], context [m,C] -> [n,C]. When `weights` is non-null it
  /// receives the post-softmax attention [heads, n, m].
  Tensor operator()(const Tensor& queries, const Tensor& context, Tensor* weights = nullptr) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

}  // namespace ctitans

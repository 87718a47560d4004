#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "changetitans/adapter.hpp"
#include "changetitans/vtitans.hpp"

namespace ctitans {

enum class UpsampleKind { Convex, Bilinear };

struct DecoderConfig {
  std::size_t dim = 192;
  std::size_t out_channels = 64;  // C' after the 1x1 reduction
  std::size_t heads = 3;
  std::size_t persistent = 4;
  bool memory = true;
  std::size_t ffn_ratio = 4;
  std::size_t convex_k = 3;
  /// Final upsampling factor from the finest pyramid level (p/4).
  std::size_t factor = 4;
  UpsampleKind upsampling = UpsampleKind::Convex;
  bool memory_residual = false;
};

/// 2x bilinear upsample, skip concat + 1x1 merge, three Titans blocks.
struct DecoderStage {
  Conv2d merge;
  std::array<TitansBlock, 3> blocks;

  DecoderStage() = default;
  DecoderStage(const DecoderConfig& cfg, Rng& rng);
  Tensor operator()(const Tensor& coarse, const Tensor& skip) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

/// Shallow conv head predicting k*k*f*f upsampling logits per LR pixel.
struct ConvexHead {
  std::size_t k = 3;
  std::size_t factor = 4;
  Conv2d hidden;
  Conv2d logits;

  ConvexHead() = default;
  ConvexHead(std::size_t channels, std::size_t k, std::size_t factor, Rng& rng);
  Tensor raw_logits(const Tensor& y) const;
  /// Softmax-normalized weights [k*k, h*f, w*f].
  Tensor weights(const Tensor& y) const { return convex_weights(raw_logits(y), k, factor); }
  void collect(const std::string& prefix, ParamList& out) const;
};

struct Decoder {
  DecoderConfig cfg;
  std::array<DecoderStage, 3> stages;  // consume levels 3, 2, 1
  LayerNorm out_norm;                  // closes the pre-norm residual stream
  Conv2d reduce;                       // C -> C'
  ConvexHead head;
  Conv2d to_logit;                     // C' -> 1

  Decoder() = default;
  Decoder(const DecoderConfig& cfg, Rng& rng);

  /// Finest-level decoded map y_hat [C', h1, w1].
  Tensor decode(const FeaturePyramid& fused) const;
  /// Final norm and 1x1 reduction of the last stage output.
  Tensor project(const Tensor& x) const;
  /// Full-resolution logits [H, W] from y_hat.
  Tensor upsample_logits(const Tensor& y_hat) const;
  Tensor operator()(const FeaturePyramid& fused) const { return upsample_logits(decode(fused)); }
  void collect(const std::string& prefix, ParamList& out) const;
};

/// Pixelwise change probabilities plus the binarized mask (p > 0.5 is change;
/// exactly 0.5 stays unchanged).
struct ChangeMap {
  Tensor probability;  // [H, W]
  std::vector<std::uint8_t> mask;
  std::size_t height = 0, width = 0;
};

/// Sigmoid probabilities, kept on the tape.
Tensor change_probability(const Tensor& logits);
ChangeMap predict(const Tensor& logits);
std::vector<std::uint8_t> binarize(const Tensor& probability, Scalar threshold = 0.5);

}  // namespace ctitans

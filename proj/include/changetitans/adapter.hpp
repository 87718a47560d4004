#pragma once

#include <array>
#include <utility>

#include "changetitans/nn.hpp"
#include "changetitans/vtitans.hpp"

namespace ctitans {

/// Four-scale pyramid of channel-first maps at strides p/4, p/2, p, 2p.
using FeaturePyramid = std::array<Tensor, 4>;

/// Spatial extents of the four pyramid levels for an H x W input.
struct ScaleLayout {
  std::array<std::pair<std::size_t, std::size_t>, 4> extent;

  static ScaleLayout for_image(std::size_t H, std::size_t W, std::size_t patch);
  std::size_t tokens(std::size_t j) const { return extent[j].first * extent[j].second; }
  std::size_t total_tokens() const { return tokens(0) + tokens(1) + tokens(2) + tokens(3); }
};

/// Splits token-concatenated spatial features [N, C] into per-scale maps.
FeaturePyramid split_scales(const Tensor& tokens, const ScaleLayout& layout);
/// Inverse of split_scales.
Tensor join_scales(const FeaturePyramid& maps);

/// Convolutional stem producing the initial multi-scale spatial features.
struct SpatialPrior {
  std::size_t patch = 16;
  Conv2d stem;
  std::vector<Conv2d> down;       // reach stride p/4
  std::array<Conv2d, 3> levels;   // p/4 -> p/2 -> p -> 2p
  std::array<Conv2d, 4> project;  // 1x1 per scale

  SpatialPrior() = default;
  SpatialPrior(std::size_t image_channels, std::size_t dim, std::size_t patch, Rng& rng);
  FeaturePyramid maps(const Tensor& image) const;
  /// Token-concatenated c^(0): [16T + 4T + T + T/4, C].
  Tensor operator()(const Tensor& image) const { return join_scales(maps(image)); }
  void collect(const std::string& prefix, ParamList& out) const;
};

/// Convolutional feed-forward net: fc -> per-scale depthwise 3x3 -> GELU -> fc.
struct Cffn {
  LayerNorm norm;
  Linear fc1;
  Conv2d dw;
  Linear fc2;

  Cffn() = default;
  Cffn(std::size_t dim, std::size_t hidden, Rng& rng);
  /// Depthwise stage output (before the activation) for the given tokens.
  Tensor hidden(const Tensor& c, const ScaleLayout& layout) const;
  Tensor operator()(const Tensor& c, const ScaleLayout& layout) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

/// Injector + extractor pair exchanging information with one encoder tap.
struct AdapterStage {
  LayerNorm inj_query, inj_context;
  MultiHeadAttention inj_attn;
  Tensor gamma_in;
  LayerNorm ext_query, ext_context;
  MultiHeadAttention ext_attn;
  Tensor gamma_ex;
  Cffn cffn;

  AdapterStage() = default;
  AdapterStage(std::size_t dim, std::size_t heads, std::size_t cffn_hidden, Scalar gate_init,
               Rng& rng);
  /// f + gamma_in * CrossAttention(f, c)
  Tensor inject(const Tensor& f, const Tensor& c) const;
  /// c_hat = c + gamma_ex * CrossAttention(c, f_hat); returns c_hat + CFFN(c_hat).
  Tensor extract(const Tensor& c, const Tensor& f_hat, const ScaleLayout& layout) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct AdapterConfig {
  std::size_t dim = 192;
  std::size_t patch = 16;
  std::size_t heads = 3;
  std::size_t image_channels = 3;
  /// CFFN hidden width as a fraction of dim (at least 1 channel).
  Scalar cffn_ratio = 0.25;
  Scalar gate_init = 0.0;
};

struct VTitansAdapter {
  SpatialPrior prior;
  std::array<AdapterStage, 4> stages;

  VTitansAdapter() = default;
  VTitansAdapter(const AdapterConfig& cfg, Rng& rng);
  void collect(const std::string& prefix, ParamList& out) const;
};

/// f'_j = Interpolate(f_j) + c'_j with (c'_1|..|c'_4) = c4.
FeaturePyramid build_pyramid(const EncoderTaps& taps, const Tensor& c4, const ScaleLayout& layout);
/// Adapter-free pyramid: each tap resized to its level.
FeaturePyramid pyramid_from_taps(const EncoderTaps& taps, const ScaleLayout& layout);

/// Encoder pass with the four inject/extract rounds interleaved at the tap
/// layers; returns the pyramid for one temporal stream.
FeaturePyramid encode_with_adapter(const VTitansEncoder& encoder, const VTitansAdapter& adapter,
                                   const Tensor& image);

}  // namespace ctitans

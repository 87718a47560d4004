#pragma once

#include "changetitans/nn.hpp"

namespace ctitans {

// Feature maps here are channel-first [C, h, w].

/// Shared gating parameters of one pyramid level.
struct CbamParams {
  Tensor w1, w2;    // [C, C]; gate = sigmoid(W1 avg + W2 max)
  Conv2d spatial;   // 3x3, 2 -> 1, reflect padding
  Conv2d merge;     // 1x1, 2C -> C; used by the Conv variant only

  CbamParams() = default;
  CbamParams(std::size_t channels, Rng& rng);
  void collect(const std::string& prefix, ParamList& out, bool with_merge) const;
};

enum class CbamVariant { Sum, Diff, Conv };

/// Channel weights in (0,1) from spatial avg/max pooling of `source`: [C].
Tensor channel_gate(const Tensor& source, const CbamParams& params);
/// Per-pixel weights in (0,1) from channel avg/max pooling of `source`: [h, w].
Tensor spatial_gate(const Tensor& source, const CbamParams& params);

/// Cross-gated CAM then SAM on both streams (each gated by the other), then
/// combined by `variant`.
Tensor ts_cbam_fuse(const Tensor& f1, const Tensor& f2, const CbamParams& params,
                    CbamVariant variant = CbamVariant::Sum);

}  // namespace ctitans

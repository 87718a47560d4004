#pragma once

#include <cstddef>
#include <vector>

#include "changetitans/tensor.hpp"

namespace ctitans {

// Elementwise binary ops broadcast with numpy rules (right-aligned extents,
// size-1 extents stretch).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

Tensor scale(const Tensor& x, Scalar c);
Tensor add_scalar(const Tensor& x, Scalar c);
Tensor neg(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor softplus(const Tensor& x);
/// Values clamped to [lo, hi]; gradient passes only where unclamped.
Tensor clamp(const Tensor& x, Scalar lo, Scalar hi);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor mean_axis(const Tensor& x, std::size_t axis, bool keepdim = false);
/// Max along an axis; ties route the gradient to the first maximal element.
Tensor max_axis(const Tensor& x, std::size_t axis, bool keepdim = false);

/// a[..., m, k] x b[..., k, n]. b may be 2-D (shared across a's batch) or
/// carry the same leading extents as a.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm);
/// Swaps the last two axes.
Tensor transpose(const Tensor& x);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);

/// Index sentinel for gather: the output element is a constant zero.
inline constexpr std::size_t kGatherZero = static_cast<std::size_t>(-1);
/// out[i] = x[index[i]] (or 0 for kGatherZero); gradient scatter-adds.
Tensor gather(const Tensor& x, std::vector<std::size_t> index, Shape shape);

Tensor softmax(const Tensor& x, std::size_t axis);
/// Normalizes over the last axis, then applies gamma/beta of that length.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Scalar eps = 1e-5);

enum class PadMode { Zero, Reflect };

/// Cross-correlation of x[C_in,H,W] with w[C_out,C_in,k,k]; bias may be
/// undefined. Output extent (H + 2*padding - k)/stride + 1 must be integral.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
              std::size_t padding, PadMode mode = PadMode::Zero);
/// Per-channel cross-correlation with w[C,1,k,k].
Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
                        std::size_t padding, PadMode mode = PadMode::Zero);
/// Reflect-pads the two trailing spatial axes of x[C,H,W] (edge not repeated).
Tensor reflect_pad(const Tensor& x, std::size_t pad);

enum class PoolMode { Avg, Max };
/// x[C,H,W] -> [C]
Tensor pool_spatial(const Tensor& x, PoolMode mode);
/// x[C,H,W] -> [1,H,W]
Tensor pool_channel(const Tensor& x, PoolMode mode);

/// Bilinear resampling of x[C,H,W] with half-pixel centers and clamped borders.
Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w);

/// Rearranges per-pixel logits[k*k*f*f, h, w] into per-HR-pixel neighbour
/// logits [k*k, h*f, w*f] and normalizes each HR pixel with a softmax.
Tensor convex_weights(const Tensor& logits, std::size_t k, std::size_t factor);
/// HR value at (r,s) = sum_i weights[i,r,s] * P_i(r,s), where P_i is the
/// bilinear sample of lr at the mapped HR location offset by neighbour i of a
/// k x k window. lr is [h,w] or [1,h,w]; weights is [k*k, h*f, w*f].
Tensor convex_upsample(const Tensor& lr, const Tensor& weights, std::size_t k, std::size_t factor);

/// Token matrix [h*w, C] <-> channel-first map [C, h, w].
Tensor tokens_to_map(const Tensor& tokens, std::size_t h, std::size_t w);
Tensor map_to_tokens(const Tensor& map);

}  // namespace ctitans

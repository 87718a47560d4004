#include "changetitans/tscbam.hpp"

#include <cmath>

namespace ctitans {

CbamParams::CbamParams(std::size_t channels, Rng& rng)
    : w1(param(rng.normal({channels, channels}, 1.0 / std::sqrt(static_cast<Scalar>(channels))))),
      w2(param(rng.normal({channels, channels}, 1.0 / std::sqrt(static_cast<Scalar>(channels))))),
      spatial(2, 1, 3, rng, 1),
      merge(2 * channels, channels, 1, rng, 0) {
  spatial.mode = PadMode::Reflect;
}

void CbamParams::collect(const std::string& prefix, ParamList& out, bool with_merge) const {
  out.emplace_back(join_name(prefix, "w1"), w1);
  out.emplace_back(join_name(prefix, "w2"), w2);
  spatial.collect(join_name(prefix, "spatial"), out);
  if (with_merge) merge.collect(join_name(prefix, "merge"), out);
}

Tensor channel_gate(const Tensor& source, const CbamParams& params) {
  if (source.rank() != 3 || source.dim(0) != params.w1.dim(0))
    throw ShapeError("channel_gate: source " + to_string(source.shape()) +
                     " does not match " + std::to_string(params.w1.dim(0)) + " channels");
  const std::size_t C = source.dim(0);
  auto avg = reshape(pool_spatial(source, PoolMode::Avg), {C, 1});
  auto mx = reshape(pool_spatial(source, PoolMode::Max), {C, 1});
  auto z = add(matmul(params.w1, avg), matmul(params.w2, mx));
  return sigmoid(reshape(z, {C}));
}

Tensor spatial_gate(const Tensor& source, const CbamParams& params) {
  if (source.rank() != 3) throw ShapeError("spatial_gate: source must be [C,h,w]");
  auto pooled = concat({pool_channel(source, PoolMode::Avg), pool_channel(source, PoolMode::Max)}, 0);
  // Reflect padding needs extent >= 2; a 1-pixel map falls back to zero padding.
  Conv2d conv = params.spatial;
  if (source.dim(1) < 2 || source.dim(2) < 2) conv.mode = PadMode::Zero;
  auto z = conv(pooled);
  return sigmoid(reshape(z, {source.dim(1), source.dim(2)}));
}

Tensor ts_cbam_fuse(const Tensor& f1, const Tensor& f2, const CbamParams& params,
                    CbamVariant variant) {
  if (f1.shape() != f2.shape())
    throw ShapeError("ts_cbam: stream shapes differ: " + to_string(f1.shape()) + " vs " +
                     to_string(f2.shape()));
  const std::size_t C = f1.dim(0), h = f1.dim(1), w = f1.dim(2);
  auto cam = [&](const Tensor& target, const Tensor& source) {
    return mul(reshape(channel_gate(source, params), {C, 1, 1}), target);
  };
  auto sam = [&](const Tensor& target, const Tensor& source) {
    return mul(reshape(spatial_gate(source, params), {1, h, w}), target);
  };
  auto f1c = cam(f1, f2);
  auto f2c = cam(f2, f1);
  auto f1s = sam(f1c, f2c);
  auto f2s = sam(f2c, f1c);
  switch (variant) {
    case CbamVariant::Sum:
      return add(f1s, f2s);
    case CbamVariant::Diff:
      return abs(sub(f1s, f2s));
    case CbamVariant::Conv:
      return params.merge(concat({f1s, f2s}, 0));
  }
  throw std::logic_error("ts_cbam: unknown variant");
}

}  // namespace ctitans

#include "changetitans/adapter.hpp"

#include <algorithm>
#include <cmath>

namespace ctitans {

namespace {

Tensor half_size(const Tensor& x) {
  // Half-pixel bilinear at exactly 1/2 is a 2x2 average.
  return bilinear_resize(x, x.dim(1) / 2, x.dim(2) / 2);
}

}  // namespace

ScaleLayout ScaleLayout::for_image(std::size_t H, std::size_t W, std::size_t patch) {
  if (patch % 4 != 0 || H % (2 * patch) != 0 || W % (2 * patch) != 0)
    throw ShapeError("adapter: image " + std::to_string(H) + "x" + std::to_string(W) +
                     " not divisible by 2p = " + std::to_string(2 * patch));
  ScaleLayout l;
  l.extent[0] = {4 * H / patch, 4 * W / patch};
  l.extent[1] = {2 * H / patch, 2 * W / patch};
  l.extent[2] = {H / patch, W / patch};
  l.extent[3] = {H / (2 * patch), W / (2 * patch)};
  return l;
}

FeaturePyramid split_scales(const Tensor& tokens, const ScaleLayout& layout) {
  if (tokens.rank() != 2 || tokens.dim(0) != layout.total_tokens())
    throw ShapeError("adapter: cannot split " + to_string(tokens.shape()) + " into " +
                     std::to_string(layout.total_tokens()) + " scale tokens");
  FeaturePyramid out;
  std::size_t start = 0;
  for (std::size_t j = 0; j < 4; ++j) {
    const auto [h, w] = layout.extent[j];
    out[j] = tokens_to_map(slice(tokens, 0, start, h * w), h, w);
    start += h * w;
  }
  return out;
}

Tensor join_scales(const FeaturePyramid& maps) {
  std::vector<Tensor> parts;
  for (const auto& m : maps) parts.push_back(map_to_tokens(m));
  return concat(parts, 0);
}

SpatialPrior::SpatialPrior(std::size_t image_channels, std::size_t dim, std::size_t p, Rng& rng)
    : patch(p), stem(image_channels, dim, 3, rng, 1) {
  for (std::size_t s = 1; s < patch / 4; s *= 2) down.emplace_back(dim, dim, 3, rng, 1);
  for (auto& l : levels) l = Conv2d(dim, dim, 3, rng, 1);
  for (auto& pr : project) pr = Conv2d(dim, dim, 1, rng, 0);
}

FeaturePyramid SpatialPrior::maps(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(1) % (2 * patch) != 0 || image.dim(2) % (2 * patch) != 0)
    throw ShapeError("spatial prior: image " + to_string(image.shape()) +
                     " not divisible by 2p = " + std::to_string(2 * patch));
  Tensor x = relu(stem(image));
  for (const auto& d : down) x = relu(d(half_size(x)));
  FeaturePyramid out;
  out[0] = project[0](x);
  for (std::size_t j = 0; j < 3; ++j) {
    x = relu(levels[j](half_size(x)));
    out[j + 1] = project[j + 1](x);
  }
  return out;
}

void SpatialPrior::collect(const std::string& prefix, ParamList& out) const {
  stem.collect(join_name(prefix, "stem"), out);
  for (std::size_t i = 0; i < down.size(); ++i)
    down[i].collect(join_name(prefix, "down" + std::to_string(i)), out);
  for (std::size_t i = 0; i < 3; ++i)
    levels[i].collect(join_name(prefix, "level" + std::to_string(i + 2)), out);
  for (std::size_t i = 0; i < 4; ++i)
    project[i].collect(join_name(prefix, "project" + std::to_string(i + 1)), out);
}

Cffn::Cffn(std::size_t dim, std::size_t hid, Rng& rng)
    : norm(dim), fc1(dim, hid, rng), dw(Conv2d::make_depthwise(hid, 3, rng, 1)), fc2(hid, dim, rng) {
  fc2.zero();
}

Tensor Cffn::hidden(const Tensor& c, const ScaleLayout& layout) const {
  auto z = fc1(norm(c));
  auto maps = split_scales(z, layout);
  for (auto& m : maps) m = dw(m);
  return join_scales(maps);
}

Tensor Cffn::operator()(const Tensor& c, const ScaleLayout& layout) const {
  return fc2(gelu(hidden(c, layout)));
}

void Cffn::collect(const std::string& prefix, ParamList& out) const {
  norm.collect(join_name(prefix, "norm"), out);
  fc1.collect(join_name(prefix, "fc1"), out);
  dw.collect(join_name(prefix, "dw"), out);
  fc2.collect(join_name(prefix, "fc2"), out);
}

AdapterStage::AdapterStage(std::size_t dim, std::size_t heads, std::size_t cffn_hidden,
                           Scalar gate_init, Rng& rng)
    : inj_query(dim),
      inj_context(dim),
      inj_attn(dim, heads, rng),
      gamma_in(param(Tensor::scalar(gate_init))),
      ext_query(dim),
      ext_context(dim),
      ext_attn(dim, heads, rng),
      gamma_ex(param(Tensor::scalar(gate_init))),
      cffn(dim, cffn_hidden, rng) {}

Tensor AdapterStage::inject(const Tensor& f, const Tensor& c) const {
  if (f.rank() != 2 || c.rank() != 2 || f.dim(1) != c.dim(1))
    throw ShapeError("inject: features " + to_string(f.shape()) + " and spatial tokens " +
                     to_string(c.shape()) + " differ in width");
  return add(f, mul(gamma_in, inj_attn(inj_query(f), inj_context(c))));
}

Tensor AdapterStage::extract(const Tensor& c, const Tensor& f_hat, const ScaleLayout& layout) const {
  if (f_hat.rank() != 2 || c.rank() != 2 || f_hat.dim(1) != c.dim(1))
    throw ShapeError("extract: spatial tokens " + to_string(c.shape()) + " and features " +
                     to_string(f_hat.shape()) + " differ in width");
  auto c_hat = add(c, mul(gamma_ex, ext_attn(ext_query(c), ext_context(f_hat))));
  return add(c_hat, cffn(c_hat, layout));
}

void AdapterStage::collect(const std::string& prefix, ParamList& out) const {
  inj_query.collect(join_name(prefix, "inj_query"), out);
  inj_context.collect(join_name(prefix, "inj_context"), out);
  inj_attn.collect(join_name(prefix, "inj_attn"), out);
  out.emplace_back(join_name(prefix, "gamma_in"), gamma_in);
  ext_query.collect(join_name(prefix, "ext_query"), out);
  ext_context.collect(join_name(prefix, "ext_context"), out);
  ext_attn.collect(join_name(prefix, "ext_attn"), out);
  out.emplace_back(join_name(prefix, "gamma_ex"), gamma_ex);
  cffn.collect(join_name(prefix, "cffn"), out);
}

VTitansAdapter::VTitansAdapter(const AdapterConfig& cfg, Rng& rng)
    : prior(cfg.image_channels, cfg.dim, cfg.patch, rng) {
  const auto hidden = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::lround(cfg.cffn_ratio * static_cast<Scalar>(cfg.dim))));
  for (auto& s : stages) s = AdapterStage(cfg.dim, cfg.heads, hidden, cfg.gate_init, rng);
}

void VTitansAdapter::collect(const std::string& prefix, ParamList& out) const {
  prior.collect(join_name(prefix, "prior"), out);
  for (std::size_t j = 0; j < 4; ++j)
    stages[j].collect(join_name(prefix, "stage" + std::to_string(j + 1)), out);
}

FeaturePyramid pyramid_from_taps(const EncoderTaps& taps, const ScaleLayout& layout) {
  const auto [h, w] = layout.extent[2];
  FeaturePyramid out;
  for (std::size_t j = 0; j < 4; ++j) {
    const auto [hj, wj] = layout.extent[j];
    out[j] = bilinear_resize(tokens_to_map(taps[j], h, w), hj, wj);
  }
  return out;
}

FeaturePyramid build_pyramid(const EncoderTaps& taps, const Tensor& c4, const ScaleLayout& layout) {
  auto c = split_scales(c4, layout);
  auto f = pyramid_from_taps(taps, layout);
  FeaturePyramid out;
  for (std::size_t j = 0; j < 4; ++j) out[j] = add(f[j], c[j]);
  return out;
}

FeaturePyramid encode_with_adapter(const VTitansEncoder& encoder, const VTitansAdapter& adapter,
                                   const Tensor& image) {
  const auto layout = ScaleLayout::for_image(image.dim(1), image.dim(2), encoder.cfg.patch);
  Tensor x = encoder.embed(image);
  Tensor c = adapter.prior(image);
  EncoderTaps taps;
  std::size_t prev = 0;
  const auto layers = encoder.tap_layers();
  for (std::size_t j = 0; j < 4; ++j) {
    x = encoder.run(x, prev, layers[j]);
    taps[j] = x;
    x = adapter.stages[j].inject(x, c);
    c = adapter.stages[j].extract(c, x, layout);
    prev = layers[j];
  }
  return build_pyramid(taps, c, layout);
}

}  // namespace ctitans

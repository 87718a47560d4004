#include "changetitans/decoder.hpp"

namespace ctitans {

namespace {
constexpr std::size_t kDecoderChunk = 64;
}

DecoderStage::DecoderStage(const DecoderConfig& cfg, Rng& rng)
    : merge(2 * cfg.dim, cfg.dim, 1, rng, 0) {
  for (auto& b : blocks)
    b = TitansBlock(cfg.dim, cfg.heads, kDecoderChunk, cfg.persistent, cfg.memory, cfg.ffn_ratio,
                    rng, cfg.memory_residual);
}

Tensor DecoderStage::operator()(const Tensor& coarse, const Tensor& skip) const {
  const std::size_t h = skip.dim(1), w = skip.dim(2);
  if (coarse.dim(1) * 2 != h || coarse.dim(2) * 2 != w || coarse.dim(0) != skip.dim(0))
    throw ShapeError("decoder: level " + to_string(coarse.shape()) +
                     " cannot be upsampled onto skip " + to_string(skip.shape()));
  auto up = bilinear_resize(coarse, h, w);
  auto x = map_to_tokens(merge(concat({up, skip}, 0)));
  for (const auto& b : blocks) x = b.forward(x);
  return tokens_to_map(x, h, w);
}

void DecoderStage::collect(const std::string& prefix, ParamList& out) const {
  merge.collect(join_name(prefix, "merge"), out);
  for (std::size_t i = 0; i < blocks.size(); ++i)
    blocks[i].collect(join_name(prefix, "block" + std::to_string(i + 1)), out);
}

ConvexHead::ConvexHead(std::size_t channels, std::size_t kk, std::size_t f, Rng& rng)
    : k(kk), factor(f), hidden(channels, channels, 3, rng, 1), logits(channels, kk * kk * f * f, 1, rng, 0) {
  if (k % 2 == 0) throw std::invalid_argument("convex head: neighbourhood size must be odd");
  // Zero logits start the upsampler as a uniform (box) filter.
  for (auto& v : logits.weight.mutable_data()) v = 0;
}

Tensor ConvexHead::raw_logits(const Tensor& y) const { return logits(relu(hidden(y))); }

void ConvexHead::collect(const std::string& prefix, ParamList& out) const {
  hidden.collect(join_name(prefix, "hidden"), out);
  logits.collect(join_name(prefix, "logits"), out);
}

Decoder::Decoder(const DecoderConfig& c, Rng& rng) : cfg(c) {
  for (auto& s : stages) s = DecoderStage(cfg, rng);
  out_norm = LayerNorm(cfg.dim);
  reduce = Conv2d(cfg.dim, cfg.out_channels, 1, rng, 0);
  if (cfg.upsampling == UpsampleKind::Convex)
    head = ConvexHead(cfg.out_channels, cfg.convex_k, cfg.factor, rng);
  to_logit = Conv2d(cfg.out_channels, 1, 1, rng, 0);
  // Small head keeps the initial probabilities near 0.5.
  for (auto& v : to_logit.weight.mutable_data()) v *= 0.1;
}

Tensor Decoder::decode(const FeaturePyramid& fused) const {
  for (std::size_t j = 0; j < 3; ++j)
    if (fused[j].dim(1) != 2 * fused[j + 1].dim(1) || fused[j].dim(2) != 2 * fused[j + 1].dim(2))
      throw ShapeError("decoder: pyramid levels " + to_string(fused[j].shape()) + " and " +
                       to_string(fused[j + 1].shape()) + " are not a 2x chain");
  Tensor x = fused[3];
  for (std::size_t s = 0; s < 3; ++s) x = stages[s](x, fused[2 - s]);
  return project(x);
}

Tensor Decoder::project(const Tensor& x) const {
  const std::size_t h = x.dim(1), w = x.dim(2);
  return reduce(tokens_to_map(out_norm(map_to_tokens(x)), h, w));
}

Tensor Decoder::upsample_logits(const Tensor& y_hat) const {
  const std::size_t h = y_hat.dim(1), w = y_hat.dim(2);
  auto lr = to_logit(y_hat);
  if (cfg.upsampling == UpsampleKind::Bilinear)
    return reshape(bilinear_resize(lr, h * cfg.factor, w * cfg.factor), {h * cfg.factor, w * cfg.factor});
  return convex_upsample(lr, head.weights(y_hat), head.k, head.factor);
}

void Decoder::collect(const std::string& prefix, ParamList& out) const {
  for (std::size_t s = 0; s < 3; ++s)
    stages[s].collect(join_name(prefix, "stage" + std::to_string(s + 1)), out);
  out_norm.collect(join_name(prefix, "out_norm"), out);
  reduce.collect(join_name(prefix, "reduce"), out);
  if (cfg.upsampling == UpsampleKind::Convex) head.collect(join_name(prefix, "convex_head"), out);
  to_logit.collect(join_name(prefix, "to_logit"), out);
}

Tensor change_probability(const Tensor& logits) { return sigmoid(logits); }

std::vector<std::uint8_t> binarize(const Tensor& probability, Scalar threshold) {
  std::vector<std::uint8_t> mask(probability.numel());
  const auto p = probability.data();
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = p[i] > threshold ? 1 : 0;
  return mask;
}

ChangeMap predict(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("predict: logits must be [H,W], got " + to_string(logits.shape()));
  ChangeMap m;
  m.probability = change_probability(logits);
  m.mask = binarize(m.probability);
  m.height = logits.dim(0);
  m.width = logits.dim(1);
  return m;
}

}  // namespace ctitans

#include "changetitans/vtitans.hpp"

#include <algorithm>
#include <cmath>

namespace ctitans {

void EncoderConfig::validate() const {
  if (layers == 0 || layers % 4 != 0)
    throw std::invalid_argument("encoder: layer count must be a positive multiple of 4");
  if (dim == 0 || heads == 0 || dim % heads != 0)
    throw std::invalid_argument("encoder: embedding dimension must be divisible by heads");
  if (patch < 4 || patch % 4 != 0)
    throw std::invalid_argument("encoder: patch size must be a positive multiple of 4");
  if (chunk == 0) throw std::invalid_argument("encoder: chunk size must be >= 1");
  if (image_channels == 0) throw std::invalid_argument("encoder: image needs channels");
  if (image_size % patch != 0)
    throw std::invalid_argument("encoder: image size must be divisible by the patch size");
}

PatchEmbedder::PatchEmbedder(const EncoderConfig& cfg, Rng& rng)
    : patch(cfg.patch), proj(cfg.image_channels * cfg.patch * cfg.patch, cfg.dim, rng) {
  const std::size_t side = cfg.image_size / cfg.patch;
  pos = param(rng.normal({side * side, cfg.dim}, 0.02));
}

Tensor PatchEmbedder::patchify(const Tensor& image) const {
  if (image.rank() != 3) throw ShapeError("embed: image must be [C,H,W], got " + to_string(image.shape()));
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  if (H % patch != 0 || W % patch != 0)
    throw ShapeError("embed: image " + to_string(image.shape()) + " not divisible by patch " +
                     std::to_string(patch));
  const std::size_t ph = H / patch, pw = W / patch, width = C * patch * patch;
  std::vector<std::size_t> index(ph * pw * width);
  std::size_t q = 0;
  for (std::size_t py = 0; py < ph; ++py)
    for (std::size_t px = 0; px < pw; ++px)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t dy = 0; dy < patch; ++dy)
          for (std::size_t dx = 0; dx < patch; ++dx)
            index[q++] = (c * H + py * patch + dy) * W + px * patch + dx;
  return gather(image, std::move(index), {ph * pw, width});
}

Tensor PatchEmbedder::operator()(const Tensor& image) const {
  auto patches = patchify(image);
  if (patches.dim(1) != proj.weight.dim(0))
    throw ShapeError("embed: image has " + std::to_string(image.dim(0)) +
                     " channels, projection expects " +
                     std::to_string(proj.weight.dim(0) / (patch * patch)));
  const std::size_t T = patches.dim(0);
  if (T > pos.dim(0))
    throw ShapeError("embed: " + std::to_string(T) + " tokens exceed positional table of " +
                     std::to_string(pos.dim(0)));
  auto p = T == pos.dim(0) ? pos : slice(pos, 0, 0, T);
  return add(proj(patches), p);
}

void PatchEmbedder::collect(const std::string& prefix, ParamList& out) const {
  proj.collect(join_name(prefix, "proj"), out);
  out.emplace_back(join_name(prefix, "pos"), pos);
}

TitansBlock::TitansBlock(std::size_t d, std::size_t heads, std::size_t chunk_size,
                         std::size_t n_persistent, bool memory, std::size_t ffn_ratio, Rng& rng,
                         bool memory_residual)
    : dim(d),
      chunk(chunk_size),
      norm1(d),
      norm2(d),
      attn(d, heads, rng),
      ffn_in(d, d * ffn_ratio, rng),
      ffn_out(d * ffn_ratio, d, rng),
      with_memory(memory) {
  if (chunk == 0) throw std::invalid_argument("titans block: chunk size must be >= 1");
  if (n_persistent > 0) persistent = param(rng.normal({n_persistent, d}, 0.02));
  // Residual branch starts small so deep stacks begin near identity.
  for (auto& v : ffn_out.weight.mutable_data()) v *= 0.1;
  if (with_memory) {
    memory_init = init_memory(d, rng, memory_residual);
    // theta ~ 0.05, eta ~ 0.5, alpha ~ 0.05 at initialization.
    raw_theta = param(Tensor::scalar(std::log(std::expm1(0.05))));
    raw_eta = param(Tensor::scalar(0.0));
    raw_alpha = param(Tensor::scalar(std::log(0.05 / 0.95)));
    const Scalar s = 1.0 / std::sqrt(static_cast<Scalar>(d));
    mem_wk = param(rng.normal({d, d}, s));
    mem_wv = param(rng.normal({d, d}, s));
    mem_wq = param(rng.normal({d, d}, s));
  }
}

MemoryHyper TitansBlock::hyper() const {
  MemoryHyper h;
  h.theta = softplus(raw_theta);
  h.eta = sigmoid(raw_eta);
  h.alpha = sigmoid(raw_alpha);
  h.w_k = mem_wk;
  h.w_v = mem_wv;
  h.w_q = mem_wq;
  h.detach_surprise = detach_surprise;
  return h;
}

Tensor TitansBlock::run_chunks(const Tensor& normed, bool gate, BlockTrace* trace) const {
  if (normed.rank() != 2 || normed.dim(1) != dim)
    throw ShapeError("titans block: tokens " + to_string(normed.shape()) + " do not have width " +
                     std::to_string(dim));
  const std::size_t T = normed.dim(0);
  MemoryHyper h;
  MemoryState state;
  if (with_memory) {
    h = hyper();
    state = MemoryState::fresh(memory_init);
  }
  std::vector<Tensor> outputs;
  for (std::size_t start = 0; start < T; start += chunk) {
    const std::size_t len = std::min(chunk, T - start);
    auto s = (start == 0 && len == T) ? normed : slice(normed, 0, start, len);
    std::vector<Tensor> ctx;
    if (persistent.defined()) ctx.push_back(persistent);
    if (with_memory) ctx.push_back(memory_retrieve(state, h, s));
    ctx.push_back(s);
    auto context = ctx.size() == 1 ? s : concat(ctx, 0);
    Tensor weights;
    auto m = attn(s, context, trace ? &weights : nullptr);
    if (trace) trace->attention.push_back(weights);
    if (with_memory) {
      state = memory_update(state, h, m);
      if (trace) trace->memory.push_back(state);
      if (gate) m = mul(m, state.mlp(m));
    }
    outputs.push_back(m);
  }
  return outputs.size() == 1 ? outputs.front() : concat(outputs, 0);
}

Tensor TitansBlock::chunked_attention(const Tensor& normed, BlockTrace* trace) const {
  return run_chunks(normed, false, trace);
}

Tensor TitansBlock::forward(const Tensor& tokens, BlockTrace* trace) const {
  auto x = add(tokens, run_chunks(norm1(tokens), true, trace));
  return add(x, ffn_out(gelu(ffn_in(norm2(x)))));
}

void TitansBlock::collect(const std::string& prefix, ParamList& out) const {
  norm1.collect(join_name(prefix, "norm1"), out);
  attn.collect(join_name(prefix, "attn"), out);
  if (persistent.defined()) out.emplace_back(join_name(prefix, "persistent"), persistent);
  norm2.collect(join_name(prefix, "norm2"), out);
  ffn_in.collect(join_name(prefix, "ffn_in"), out);
  ffn_out.collect(join_name(prefix, "ffn_out"), out);
  if (with_memory) {
    memory_init.collect(join_name(prefix, "memory"), out);
    out.emplace_back(join_name(prefix, "memory.raw_theta"), raw_theta);
    out.emplace_back(join_name(prefix, "memory.raw_eta"), raw_eta);
    out.emplace_back(join_name(prefix, "memory.raw_alpha"), raw_alpha);
    out.emplace_back(join_name(prefix, "memory.w_k"), mem_wk);
    out.emplace_back(join_name(prefix, "memory.w_v"), mem_wv);
    out.emplace_back(join_name(prefix, "memory.w_q"), mem_wq);
  }
}

VTitansEncoder::VTitansEncoder(const EncoderConfig& c, Rng& rng) : cfg(c) {
  cfg.validate();
  embedder = PatchEmbedder(cfg, rng);
  for (std::size_t l = 1; l <= cfg.layers; ++l)
    blocks.emplace_back(cfg.dim, cfg.heads, cfg.chunk, cfg.persistent, cfg.has_memory(l),
                        cfg.ffn_ratio, rng, cfg.memory_residual);
}

std::array<std::size_t, 4> VTitansEncoder::tap_layers() const {
  const std::size_t q = cfg.layers / 4;
  return {q, 2 * q, 3 * q, 4 * q};
}

Tensor VTitansEncoder::run(const Tensor& tokens, std::size_t begin, std::size_t end) const {
  Tensor x = tokens;
  for (std::size_t l = begin; l < end; ++l) x = blocks.at(l).forward(x);
  return x;
}

EncoderTaps VTitansEncoder::encode(const Tensor& image) const {
  EncoderTaps taps;
  Tensor x = embed(image);
  std::size_t prev = 0;
  const auto layers = tap_layers();
  for (std::size_t j = 0; j < 4; ++j) {
    x = run(x, prev, layers[j]);
    taps[j] = x;
    prev = layers[j];
  }
  return taps;
}

void VTitansEncoder::collect(const std::string& prefix, ParamList& out) const {
  embedder.collect(join_name(prefix, "embed"), out);
  for (std::size_t l = 0; l < blocks.size(); ++l)
    blocks[l].collect(join_name(prefix, "block" + std::to_string(l + 1)), out);
}

}  // namespace ctitans

#pragma once

#include <array>
#include <vector>

#include "changetitans/memory.hpp"
#include "changetitans/nn.hpp"

namespace ctitans {

struct EncoderConfig {
  std::size_t layers = 12;
  std::size_t dim = 192;
  std::size_t patch = 16;
  std::size_t chunk = 64;
  std::size_t persistent = 4;
  std::size_t heads = 3;
  /// A memory module sits on every `memory_interval`-th block; 0 disables memory.
  std::size_t memory_interval = 3;
  std::size_t ffn_ratio = 4;
  std::size_t image_channels = 3;
  /// Longest image side the positional table must cover.
  std::size_t image_size = 256;
  bool memory_residual = false;

  void validate() const;
  bool has_memory(std::size_t layer_one_based) const {
    return memory_interval > 0 && layer_one_based % memory_interval == 0;
  }
};

/// Splits an image into p x p patches (row-major patch order, each patch
/// flattened channel-major), projects them, and adds positional encodings.
struct PatchEmbedder {
  std::size_t patch = 16;
  Linear proj;
  Tensor pos;  // [T_max, C]

  PatchEmbedder() = default;
  PatchEmbedder(const EncoderConfig& cfg, Rng& rng);
  /// Patch vectors [T, C_img*p*p] before projection.
  Tensor patchify(const Tensor& image) const;
  Tensor operator()(const Tensor& image) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

/// Per-call record of what happened inside one block.
struct BlockTrace {
  std::vector<Tensor> attention;      // [heads, chunk_len, context_len] per chunk
  std::vector<MemoryState> memory;    // state after each chunk's update
};

/// One Titans block: pre-norm chunked attention over [P | h_t | chunk] with
/// queries from the chunk only, per-chunk memory update, output gating
/// o = m * M_t(m), then a residual feed-forward sublayer.
struct TitansBlock {
  std::size_t dim = 0;
  std::size_t chunk = 64;
  LayerNorm norm1, norm2;
  MultiHeadAttention attn;
  Tensor persistent;  // [n_p, C]; undefined when n_p == 0
  Linear ffn_in, ffn_out;

  bool with_memory = false;
  MemoryMLP memory_init;
  Tensor raw_theta, raw_eta, raw_alpha;  // softplus / sigmoid / sigmoid
  Tensor mem_wk, mem_wv, mem_wq;
  bool detach_surprise = false;

  TitansBlock() = default;
  TitansBlock(std::size_t dim, std::size_t heads, std::size_t chunk, std::size_t n_persistent,
              bool with_memory, std::size_t ffn_ratio, Rng& rng, bool memory_residual = false);

  MemoryHyper hyper() const;
  /// Chunk-wise attention output m (rows in token order) for normalized
  /// tokens; also returns the per-chunk memory states via `trace`.
  Tensor chunked_attention(const Tensor& normed, BlockTrace* trace = nullptr) const;
  Tensor forward(const Tensor& tokens, BlockTrace* trace = nullptr) const;
  void collect(const std::string& prefix, ParamList& out) const;

 private:
  Tensor run_chunks(const Tensor& normed, bool gate, BlockTrace* trace) const;
};

using EncoderTaps = std::array<Tensor, 4>;

struct VTitansEncoder {
  EncoderConfig cfg;
  PatchEmbedder embedder;
  std::vector<TitansBlock> blocks;

  VTitansEncoder() = default;
  VTitansEncoder(const EncoderConfig& cfg, Rng& rng);

  /// 1-based layer indices after which features are tapped.
  std::array<std::size_t, 4> tap_layers() const;
  Tensor embed(const Tensor& image) const { return embedder(image); }
  /// Runs blocks [begin, end) (0-based).
  Tensor run(const Tensor& tokens, std::size_t begin, std::size_t end) const;
  EncoderTaps encode(const Tensor& image) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

}  // namespace ctitans

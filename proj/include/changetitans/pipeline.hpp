#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>

#include "changetitans/adapter.hpp"
#include "changetitans/decoder.hpp"
#include "changetitans/objectives.hpp"
#include "changetitans/tscbam.hpp"
#include "changetitans/vtitans.hpp"

namespace ctitans {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Fusion { Sum, Diff, Conv, SiamDiff, SiamConc, EarlyFusion };

std::string to_string(Fusion f);
Fusion parse_fusion(const std::string& name);

struct ModelConfig {
  EncoderConfig encoder;
  bool use_adapter = true;
  Scalar gate_init = 0.0;
  Fusion fusion = Fusion::Sum;
  std::size_t decoder_channels = 64;
  bool decoder_memory = true;
  UpsampleKind upsampling = UpsampleKind::Convex;
  std::size_t convex_k = 3;
  LossConfig loss;
  std::uint64_t seed = 0;

  void validate() const;
};

enum class OptimizerKind { Sgd, Adam };

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::Sgd;
  Scalar learning_rate = 0.05;
  Scalar momentum = 0.9;
  Scalar beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  Scalar weight_decay = 0.0;
  /// Global gradient norm cap; 0 disables clipping.
  Scalar gradient_clipping = 0.5;
  std::size_t steps = 1000;
  bool augment = false;
};

/// Everything a config file can set.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

/// Parses key=value lines ('#' starts a comment). Unknown keys, malformed
/// values and invalid combinations raise ConfigError.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
/// Canonical text: every key in a fixed order.
std::string serialize_config(const RunConfig& cfg);
/// FNV-1a over the canonical text.
std::uint64_t config_hash(const RunConfig& cfg);

/// Small preset used for desk-scale experiments: L=4, C=32, p=8, chunk=16.
RunConfig tiny_config();

/// Stream-independent fusion baselines.
enum class BaselineKind { SiamDiff, SiamConc };
/// SiamDiff: |f1 - f2|. SiamConc: `conc` applied to the channel concat.
Tensor baseline_fuse(const Tensor& f1, const Tensor& f2, BaselineKind kind,
                     const Conv2d* conc = nullptr);

/// Called with a module name and its output while the forward pass runs.
using ForwardProbe = std::function<void(const std::string& module, const Tensor& value)>;

/// The assembled change detector: shared encoder (+ adapter) applied to both
/// frames, per-level fusion, decoder.
class ChangeTitans {
 public:
  explicit ChangeTitans(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  /// Pyramid of one image (or of the stacked pair for early fusion).
  FeaturePyramid stream(const Tensor& image, const ForwardProbe& probe = {},
                        const std::string& name = "stream") const;
  FeaturePyramid fuse(const FeaturePyramid& a, const FeaturePyramid& b,
                      const ForwardProbe& probe = {}) const;
  /// Full-resolution logits [H, W].
  Tensor logits(const Tensor& t1, const Tensor& t2, const ForwardProbe& probe = {}) const;
  ChangeMap forward(const Tensor& t1, const Tensor& t2) const;

  /// All learnable tensors under hierarchical names.
  ParamList parameters() const;

  VTitansEncoder encoder;
  VTitansAdapter adapter;
  std::array<CbamParams, 4> cbam;
  std::array<Conv2d, 4> concat_merge;  // SiamConc only
  Decoder decoder;

 private:
  ModelConfig cfg_;
};

}  // namespace ctitans

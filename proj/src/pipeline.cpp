#include "changetitans/pipeline.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

namespace ctitans {

std::string to_string(Fusion f) {
  switch (f) {
    case Fusion::Sum: return "sum";
    case Fusion::Diff: return "diff";
    case Fusion::Conv: return "conv";
    case Fusion::SiamDiff: return "siam_diff";
    case Fusion::SiamConc: return "siam_conc";
    case Fusion::EarlyFusion: return "early_fusion";
  }
  return "?";
}

Fusion parse_fusion(const std::string& name) {
  for (auto f : {Fusion::Sum, Fusion::Diff, Fusion::Conv, Fusion::SiamDiff, Fusion::SiamConc,
                 Fusion::EarlyFusion})
    if (to_string(f) == name) return f;
  throw ConfigError("unknown fusion '" + name +
                    "' (expected sum|diff|conv|siam_diff|siam_conc|early_fusion)");
}

void ModelConfig::validate() const {
  try {
    encoder.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (encoder.image_size % (2 * encoder.patch) != 0)
    throw ConfigError("image_size must be divisible by 2 * patch_size");
  if (decoder_channels == 0) throw ConfigError("decoder_channels must be >= 1");
  if (convex_k == 0 || convex_k % 2 == 0) throw ConfigError("convex_k must be odd");
  if (loss.lambda < 0) throw ConfigError("loss_lambda must be >= 0");
  if (!(loss.epsilon > 0)) throw ConfigError("loss_epsilon must be > 0");
}

namespace {

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size())
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size())
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// One entry per config key: how to read it from and write it to RunConfig.
struct KeySpec {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class Field>
KeySpec size_key(const std::string& name, Field field) {
  return {name,
          [=](RunConfig& c, const std::string& v) { field(c) = static_cast<std::size_t>(parse_uint(name, v)); },
          [=](const RunConfig& c) { return std::to_string(field(const_cast<RunConfig&>(c))); }};
}

template <class Field>
KeySpec real_key(const std::string& name, Field field) {
  return {name, [=](RunConfig& c, const std::string& v) { field(c) = parse_double(name, v); },
          [=](const RunConfig& c) { return fmt_double(field(const_cast<RunConfig&>(c))); }};
}

template <class Field>
KeySpec bool_key(const std::string& name, Field field) {
  return {name, [=](RunConfig& c, const std::string& v) { field(c) = parse_bool(name, v); },
          [=](const RunConfig& c) { return std::string(field(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

const std::vector<KeySpec>& keys() {
  static const std::vector<KeySpec> k = {
      size_key("num_titans_blocks", [](RunConfig& c) -> std::size_t& { return c.model.encoder.layers; }),
      size_key("embedding_dimension", [](RunConfig& c) -> std::size_t& { return c.model.encoder.dim; }),
      size_key("patch_size", [](RunConfig& c) -> std::size_t& { return c.model.encoder.patch; }),
      size_key("chunk_size", [](RunConfig& c) -> std::size_t& { return c.model.encoder.chunk; }),
      size_key("memory_block_interval",
               [](RunConfig& c) -> std::size_t& { return c.model.encoder.memory_interval; }),
      size_key("persistent_tokens", [](RunConfig& c) -> std::size_t& { return c.model.encoder.persistent; }),
      size_key("num_heads", [](RunConfig& c) -> std::size_t& { return c.model.encoder.heads; }),
      size_key("ffn_ratio", [](RunConfig& c) -> std::size_t& { return c.model.encoder.ffn_ratio; }),
      size_key("image_size", [](RunConfig& c) -> std::size_t& { return c.model.encoder.image_size; }),
      size_key("image_channels", [](RunConfig& c) -> std::size_t& { return c.model.encoder.image_channels; }),
      bool_key("memory_residual", [](RunConfig& c) -> bool& { return c.model.encoder.memory_residual; }),
      bool_key("use_adapter", [](RunConfig& c) -> bool& { return c.model.use_adapter; }),
      real_key("gate_init", [](RunConfig& c) -> Scalar& { return c.model.gate_init; }),
      {"fusion", [](RunConfig& c, const std::string& v) { c.model.fusion = parse_fusion(v); },
       [](const RunConfig& c) { return to_string(c.model.fusion); }},
      size_key("decoder_channels", [](RunConfig& c) -> std::size_t& { return c.model.decoder_channels; }),
      bool_key("decoder_memory", [](RunConfig& c) -> bool& { return c.model.decoder_memory; }),
      {"upsampling",
       [](RunConfig& c, const std::string& v) {
         if (v == "convex") c.model.upsampling = UpsampleKind::Convex;
         else if (v == "bilinear") c.model.upsampling = UpsampleKind::Bilinear;
         else throw ConfigError("upsampling: expected convex|bilinear, got '" + v + "'");
       },
       [](const RunConfig& c) {
         return std::string(c.model.upsampling == UpsampleKind::Convex ? "convex" : "bilinear");
       }},
      size_key("convex_k", [](RunConfig& c) -> std::size_t& { return c.model.convex_k; }),
      real_key("loss_lambda", [](RunConfig& c) -> Scalar& { return c.model.loss.lambda; }),
      real_key("loss_epsilon", [](RunConfig& c) -> Scalar& { return c.model.loss.epsilon; }),
      {"seed", [](RunConfig& c, const std::string& v) { c.model.seed = parse_uint("seed", v); },
       [](const RunConfig& c) { return std::to_string(c.model.seed); }},
      {"optimizer",
       [](RunConfig& c, const std::string& v) {
         if (v == "sgd") c.train.optimizer = OptimizerKind::Sgd;
         else if (v == "adam") c.train.optimizer = OptimizerKind::Adam;
         else throw ConfigError("optimizer: expected sgd|adam, got '" + v + "'");
       },
       [](const RunConfig& c) { return std::string(c.train.optimizer == OptimizerKind::Sgd ? "sgd" : "adam"); }},
      real_key("learning_rate", [](RunConfig& c) -> Scalar& { return c.train.learning_rate; }),
      real_key("momentum", [](RunConfig& c) -> Scalar& { return c.train.momentum; }),
      real_key("beta1", [](RunConfig& c) -> Scalar& { return c.train.beta1; }),
      real_key("beta2", [](RunConfig& c) -> Scalar& { return c.train.beta2; }),
      real_key("weight_decay", [](RunConfig& c) -> Scalar& { return c.train.weight_decay; }),
      real_key("gradient_clipping", [](RunConfig& c) -> Scalar& { return c.train.gradient_clipping; }),
      size_key("steps", [](RunConfig& c) -> std::size_t& { return c.train.steps; }),
      bool_key("augment", [](RunConfig& c) -> bool& { return c.train.augment; }),
  };
  return k;
}

void validate_train(const TrainConfig& t) {
  if (t.learning_rate < 0) throw ConfigError("learning_rate must be >= 0");
  if (t.momentum < 0 || t.momentum >= 1) throw ConfigError("momentum must be in [0,1)");
  if (t.beta1 < 0 || t.beta1 >= 1 || t.beta2 < 0 || t.beta2 >= 1)
    throw ConfigError("beta1/beta2 must be in [0,1)");
  if (t.gradient_clipping < 0) throw ConfigError("gradient_clipping must be >= 0");
}

}  // namespace

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::map<std::string, const KeySpec*> index;
  for (const auto& k : keys()) index[k.name] = &k;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    const auto key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    const auto it = index.find(key);
    if (it == index.end()) throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    it->second->set(cfg, value);
  }
  cfg.model.validate();
  validate_train(cfg.train);
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : keys()) out += k.name + "=" + k.get(cfg) + "\n";
  return out;
}

std::uint64_t config_hash(const RunConfig& cfg) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : serialize_config(cfg)) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

RunConfig tiny_config() {
  RunConfig c;
  auto& e = c.model.encoder;
  e.layers = 4;
  e.dim = 32;
  e.patch = 8;
  e.chunk = 16;
  e.heads = 4;
  e.persistent = 4;
  e.memory_interval = 2;
  e.image_size = 32;
  c.model.decoder_channels = 32;
  c.train.learning_rate = 0.1;
  c.train.steps = 2000;
  return c;
}

Tensor baseline_fuse(const Tensor& f1, const Tensor& f2, BaselineKind kind, const Conv2d* conc) {
  if (f1.shape() != f2.shape())
    throw ShapeError("baseline fusion: streams " + to_string(f1.shape()) + " and " +
                     to_string(f2.shape()) + " differ");
  if (kind == BaselineKind::SiamDiff) return abs(sub(f1, f2));
  if (conc == nullptr) throw std::invalid_argument("baseline fusion: SiamConc needs its 1x1 conv");
  return (*conc)(concat({f1, f2}, 0));
}

namespace {

ModelConfig normalized(ModelConfig cfg) {
  cfg.validate();
  if (cfg.fusion == Fusion::EarlyFusion) cfg.encoder.image_channels *= 2;
  return cfg;
}

DecoderConfig decoder_config(const ModelConfig& m) {
  DecoderConfig d;
  d.dim = m.encoder.dim;
  d.out_channels = m.decoder_channels;
  d.heads = m.encoder.heads;
  d.persistent = m.encoder.persistent;
  d.memory = m.decoder_memory;
  d.ffn_ratio = m.encoder.ffn_ratio;
  d.convex_k = m.convex_k;
  d.factor = m.encoder.patch / 4;
  d.upsampling = m.upsampling;
  d.memory_residual = m.encoder.memory_residual;
  return d;
}

void emit(const ForwardProbe& probe, const std::string& name, const Tensor& t) {
  if (probe) probe(name, t);
}

}  // namespace

ChangeTitans::ChangeTitans(const ModelConfig& cfg) : cfg_(normalized(cfg)) {
  Rng rng(cfg_.seed);
  encoder = VTitansEncoder(cfg_.encoder, rng);
  if (cfg_.use_adapter) {
    AdapterConfig a;
    a.dim = cfg_.encoder.dim;
    a.patch = cfg_.encoder.patch;
    a.heads = cfg_.encoder.heads;
    a.image_channels = cfg_.encoder.image_channels;
    a.gate_init = cfg_.gate_init;
    adapter = VTitansAdapter(a, rng);
  }
  const std::size_t C = cfg_.encoder.dim;
  if (cfg_.fusion == Fusion::Sum || cfg_.fusion == Fusion::Diff || cfg_.fusion == Fusion::Conv)
    for (auto& p : cbam) p = CbamParams(C, rng);
  if (cfg_.fusion == Fusion::SiamConc)
    for (auto& m : concat_merge) m = Conv2d(2 * C, C, 1, rng, 0);
  decoder = Decoder(decoder_config(cfg_), rng);
}

FeaturePyramid ChangeTitans::stream(const Tensor& image, const ForwardProbe& probe,
                                    const std::string& name) const {
  const auto layout = ScaleLayout::for_image(image.dim(1), image.dim(2), cfg_.encoder.patch);
  Tensor x = encoder.embed(image);
  emit(probe, name + ".embed", x);
  Tensor c;
  if (cfg_.use_adapter) {
    c = adapter.prior(image);
    emit(probe, name + ".adapter.prior", c);
  }
  EncoderTaps taps;
  std::size_t prev = 0;
  const auto layers = encoder.tap_layers();
  for (std::size_t j = 0; j < 4; ++j) {
    for (std::size_t l = prev; l < layers[j]; ++l) {
      x = encoder.run(x, l, l + 1);
      emit(probe, name + ".encoder.block" + std::to_string(l + 1), x);
    }
    taps[j] = x;
    if (cfg_.use_adapter) {
      const std::string stage = name + ".adapter.stage" + std::to_string(j + 1);
      x = adapter.stages[j].inject(x, c);
      emit(probe, stage + ".inject", x);
      c = adapter.stages[j].extract(c, x, layout);
      emit(probe, stage + ".extract", c);
    }
    prev = layers[j];
  }
  auto pyr = cfg_.use_adapter ? build_pyramid(taps, c, layout) : pyramid_from_taps(taps, layout);
  for (std::size_t j = 0; j < 4; ++j) emit(probe, name + ".pyramid" + std::to_string(j + 1), pyr[j]);
  return pyr;
}

FeaturePyramid ChangeTitans::fuse(const FeaturePyramid& a, const FeaturePyramid& b,
                                  const ForwardProbe& probe) const {
  FeaturePyramid out;
  for (std::size_t j = 0; j < 4; ++j) {
    switch (cfg_.fusion) {
      case Fusion::Sum: out[j] = ts_cbam_fuse(a[j], b[j], cbam[j], CbamVariant::Sum); break;
      case Fusion::Diff: out[j] = ts_cbam_fuse(a[j], b[j], cbam[j], CbamVariant::Diff); break;
      case Fusion::Conv: out[j] = ts_cbam_fuse(a[j], b[j], cbam[j], CbamVariant::Conv); break;
      case Fusion::SiamDiff: out[j] = baseline_fuse(a[j], b[j], BaselineKind::SiamDiff); break;
      case Fusion::SiamConc:
        out[j] = baseline_fuse(a[j], b[j], BaselineKind::SiamConc, &concat_merge[j]);
        break;
      case Fusion::EarlyFusion: throw std::logic_error("early fusion has a single stream");
    }
    emit(probe, "fusion.level" + std::to_string(j + 1), out[j]);
  }
  return out;
}

Tensor ChangeTitans::logits(const Tensor& t1, const Tensor& t2, const ForwardProbe& probe) const {
  if (t1.shape() != t2.shape())
    throw ShapeError("forward: frames " + to_string(t1.shape()) + " and " + to_string(t2.shape()) +
                     " differ");
  const std::size_t channels = cfg_.fusion == Fusion::EarlyFusion ? 2 * t1.dim(0) : t1.dim(0);
  if (t1.rank() != 3 || channels != cfg_.encoder.image_channels)
    throw ShapeError("forward: frames must be [" + std::to_string(cfg_.encoder.image_channels) +
                     ",H,W] per model config, got " + to_string(t1.shape()));
  const std::size_t side = cfg_.encoder.image_size;
  if (t1.dim(1) > side || t1.dim(2) > side)
    throw ShapeError("forward: frame " + to_string(t1.shape()) + " exceeds image_size " +
                     std::to_string(side));
  FeaturePyramid fused;
  if (cfg_.fusion == Fusion::EarlyFusion) {
    fused = stream(concat({t1, t2}, 0), probe, "stream");
  } else {
    const auto a = stream(t1, probe, "stream1");
    const auto b = stream(t2, probe, "stream2");
    fused = fuse(a, b, probe);
  }
  Tensor x = fused[3];
  for (std::size_t s = 0; s < 3; ++s) {
    x = decoder.stages[s](x, fused[2 - s]);
    emit(probe, "decoder.stage" + std::to_string(s + 1), x);
  }
  x = decoder.project(x);
  emit(probe, "decoder.reduce", x);
  auto out = decoder.upsample_logits(x);
  emit(probe, "decoder.upsample", out);
  return out;
}

ChangeMap ChangeTitans::forward(const Tensor& t1, const Tensor& t2) const {
  NoGradGuard guard;
  return predict(logits(t1, t2));
}

ParamList ChangeTitans::parameters() const {
  ParamList out;
  encoder.collect("encoder", out);
  if (cfg_.use_adapter) adapter.collect("adapter", out);
  for (std::size_t j = 0; j < 4; ++j) {
    const std::string level = "fusion.level" + std::to_string(j + 1);
    if (cfg_.fusion == Fusion::Sum || cfg_.fusion == Fusion::Diff || cfg_.fusion == Fusion::Conv)
      cbam[j].collect(level, out, cfg_.fusion == Fusion::Conv);
    if (cfg_.fusion == Fusion::SiamConc) concat_merge[j].collect(level + ".merge", out);
  }
  decoder.collect("decoder", out);
  return out;
}

}  // namespace ctitans

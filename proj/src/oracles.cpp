#include "changetitans/oracles.hpp"

#include <map>

#include "changetitans/adapter.hpp"
#include "changetitans/decoder.hpp"
#include "changetitans/gradcheck.hpp"
#include "changetitans/memory.hpp"
#include "changetitans/objectives.hpp"
#include "changetitans/tscbam.hpp"
#include "changetitans/vtitans.hpp"

namespace ctitans {

namespace {

constexpr Scalar kModuleTol = 1e-4;
constexpr Scalar kLossTol = 1e-5;

// Reduces a tensor to a scalar with a fixed random weighting per shape, so
// every output element contributes a distinct direction.
class Projector {
 public:
  explicit Projector(std::uint64_t seed) : rng_(seed) {}
  Tensor operator()(const Tensor& y) {
    auto it = cache_.find(y.shape());
    if (it == cache_.end()) it = cache_.emplace(y.shape(), rng_.uniform(y.shape(), -1.0, 1.0)).first;
    return sum(mul(y, it->second));
  }

 private:
  Rng rng_;
  std::map<Shape, Tensor> cache_;
};

// Values bounded away from zero (kinks of relu/abs/max).
Tensor away_from_zero(Rng& rng, Shape shape) {
  auto t = rng.uniform(std::move(shape), 0.2, 1.5);
  for (auto& v : t.mutable_data())
    if (rng.uniform01() < 0.5) v = -v;
  return t;
}

void jitter(const ParamList& params, Rng& rng, Scalar stddev) {
  for (const auto& [name, p] : params) {
    Tensor t = p;
    auto noise = rng.normal(t.shape(), stddev);
    auto d = t.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += noise[i];
  }
}

std::vector<Tensor> tensors_of(const ParamList& params) {
  std::vector<Tensor> out;
  for (const auto& [name, p] : params) out.push_back(p);
  return out;
}

struct Suite {
  std::vector<OracleResult> results;
  std::function<void(const OracleResult&)> on_result;

  void add(const std::string& name, Scalar error, Scalar threshold = kModuleTol) {
    results.push_back({name, error, threshold});
    if (on_result) on_result(results.back());
  }
};

void elementwise_ops(Suite& s, Rng& rng, Projector& P) {
  const Shape sh{3, 4};
  auto a = rng.uniform(sh, -1.0, 1.0);
  auto b = rng.uniform(sh, -1.0, 1.0);
  auto pos = rng.uniform(sh, 0.3, 2.0);
  auto row = rng.uniform({4}, -1.0, 1.0);
  auto kinked = away_from_zero(rng, sh);

  s.add("op.add", grad_check([&](const Tensor& x) { return P(add(x, b)); }, a));
  s.add("op.add.broadcast", grad_check([&](const Tensor& x) { return P(add(a, x)); }, row));
  s.add("op.sub", grad_check([&](const Tensor& x) { return P(sub(b, x)); }, a));
  s.add("op.mul", grad_check([&](const Tensor& x) { return P(mul(x, b)); }, a));
  s.add("op.mul.broadcast", grad_check([&](const Tensor& x) { return P(mul(a, x)); }, row));
  s.add("op.div.numerator", grad_check([&](const Tensor& x) { return P(div(x, pos)); }, a));
  s.add("op.div.denominator", grad_check([&](const Tensor& x) { return P(div(a, x)); }, pos));
  s.add("op.scale", grad_check([&](const Tensor& x) { return P(scale(x, -2.5)); }, a));
  s.add("op.add_scalar", grad_check([&](const Tensor& x) { return P(add_scalar(x, 0.7)); }, a));
  s.add("op.neg", grad_check([&](const Tensor& x) { return P(neg(x)); }, a));
  s.add("op.exp", grad_check([&](const Tensor& x) { return P(exp(x)); }, a));
  s.add("op.log", grad_check([&](const Tensor& x) { return P(log(x)); }, pos));
  s.add("op.sqrt", grad_check([&](const Tensor& x) { return P(sqrt(x)); }, pos));
  s.add("op.square", grad_check([&](const Tensor& x) { return P(square(x)); }, a));
  s.add("op.abs", grad_check([&](const Tensor& x) { return P(abs(x)); }, kinked));
  s.add("op.sigmoid", grad_check([&](const Tensor& x) { return P(sigmoid(x)); }, a));
  s.add("op.tanh", grad_check([&](const Tensor& x) { return P(tanh(x)); }, a));
  s.add("op.relu", grad_check([&](const Tensor& x) { return P(relu(x)); }, kinked));
  s.add("op.gelu", grad_check([&](const Tensor& x) { return P(gelu(x)); }, a));
  s.add("op.softplus", grad_check([&](const Tensor& x) { return P(softplus(x)); }, a));
  s.add("op.clamp", grad_check([&](const Tensor& x) { return P(clamp(x, -0.1, 0.1)); }, kinked));
}

void structural_ops(Suite& s, Rng& rng, Projector& P) {
  auto x = rng.uniform({2, 3, 4}, -1.0, 1.0);
  auto distinct = rng.uniform({2, 3, 4}, -1.0, 1.0);
  // Well-separated values keep the argmax stable under perturbation.
  {
    auto d = distinct.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = 0.1 * static_cast<Scalar>((i * 7) % d.size());
  }
  s.add("op.sum", grad_check([&](const Tensor& t) { return scale(sum(t), 0.3); }, x));
  s.add("op.mean", grad_check([&](const Tensor& t) { return mean(square(t)); }, x));
  for (std::size_t axis = 0; axis < 3; ++axis) {
    const auto ax = std::to_string(axis);
    s.add("op.sum_axis" + ax, grad_check([&](const Tensor& t) { return P(sum_axis(t, axis)); }, x));
    s.add("op.mean_axis" + ax, grad_check([&](const Tensor& t) { return P(mean_axis(t, axis, true)); }, x));
    s.add("op.max_axis" + ax, grad_check([&](const Tensor& t) { return P(max_axis(t, axis)); }, distinct));
    s.add("op.softmax" + ax, grad_check([&](const Tensor& t) { return P(softmax(t, axis)); }, x));
  }
  auto w = rng.uniform({4, 5}, -1.0, 1.0);
  auto batched = rng.uniform({2, 4, 5}, -1.0, 1.0);
  s.add("op.matmul.lhs", grad_check([&](const Tensor& t) { return P(matmul(t, w)); }, x));
  s.add("op.matmul.rhs", grad_check([&](const Tensor& t) { return P(matmul(x, t)); }, w));
  s.add("op.matmul.batched",
        grad_check([&](const Tensor& t) { return P(matmul(x, t)); }, batched));
  s.add("op.reshape", grad_check([&](const Tensor& t) { return P(reshape(t, {4, 6})); }, x));
  s.add("op.permute", grad_check([&](const Tensor& t) { return P(permute(t, {2, 0, 1})); }, x));
  s.add("op.transpose", grad_check([&](const Tensor& t) { return P(transpose(t)); }, x));
  s.add("op.concat", grad_check([&](const Tensor& t) { return P(concat({t, x, t}, 1)); }, x));
  s.add("op.slice", grad_check([&](const Tensor& t) { return P(slice(t, 2, 1, 2)); }, x));
  s.add("op.gather", grad_check(
                         [&](const Tensor& t) {
                           return P(gather(t, {0, 5, 5, kGatherZero, 23, 11}, {2, 3}));
                         },
                         x));
  auto gamma = rng.uniform({4}, 0.5, 1.5), beta = rng.uniform({4}, -0.5, 0.5);
  s.add("op.layer_norm.x", grad_check([&](const Tensor& t) { return P(layer_norm(t, gamma, beta)); }, x));
  s.add("op.layer_norm.gamma", grad_check([&](const Tensor& t) { return P(layer_norm(x, t, beta)); }, gamma));
  s.add("op.layer_norm.beta", grad_check([&](const Tensor& t) { return P(layer_norm(x, gamma, t)); }, beta));
}

void spatial_ops(Suite& s, Rng& rng, Projector& P) {
  auto x = rng.uniform({2, 5, 5}, -1.0, 1.0);
  auto w = rng.uniform({3, 2, 3, 3}, -1.0, 1.0);
  auto bias = rng.uniform({3}, -1.0, 1.0);
  auto dw = rng.uniform({2, 1, 3, 3}, -1.0, 1.0);
  auto dbias = rng.uniform({2}, -1.0, 1.0);
  for (auto [stride, pad, mode, tag] :
       {std::tuple{1, 1, PadMode::Zero, "s1p1"}, std::tuple{2, 0, PadMode::Zero, "s2p0"},
        std::tuple{2, 1, PadMode::Zero, "s2p1"}, std::tuple{1, 1, PadMode::Reflect, "reflect"}}) {
    const std::string t = tag;
    s.add("op.conv2d." + t + ".x",
          grad_check([&](const Tensor& v) { return P(conv2d(v, w, bias, stride, pad, mode)); }, x));
    s.add("op.conv2d." + t + ".w",
          grad_check([&](const Tensor& v) { return P(conv2d(x, v, bias, stride, pad, mode)); }, w));
    s.add("op.conv2d." + t + ".bias",
          grad_check([&](const Tensor& v) { return P(conv2d(x, w, v, stride, pad, mode)); }, bias));
    s.add("op.depthwise." + t + ".x",
          grad_check([&](const Tensor& v) { return P(depthwise_conv2d(v, dw, dbias, stride, pad, mode)); }, x));
    s.add("op.depthwise." + t + ".w",
          grad_check([&](const Tensor& v) { return P(depthwise_conv2d(x, v, dbias, stride, pad, mode)); }, dw));
  }
  auto w1 = rng.uniform({3, 2, 1, 1}, -1.0, 1.0);
  s.add("op.conv2d.1x1", grad_check([&](const Tensor& v) { return P(conv2d(v, w1, Tensor(), 1, 0)); }, x));
  s.add("op.reflect_pad", grad_check([&](const Tensor& v) { return P(reflect_pad(v, 2)); }, x));

  auto distinct = Tensor({2, 3, 3}, 0.0);
  {
    auto d = distinct.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = 0.1 * static_cast<Scalar>((i * 5) % d.size());
  }
  s.add("op.pool_spatial.avg", grad_check([&](const Tensor& v) { return P(pool_spatial(v, PoolMode::Avg)); }, x));
  s.add("op.pool_spatial.max",
        grad_check([&](const Tensor& v) { return P(pool_spatial(v, PoolMode::Max)); }, distinct));
  s.add("op.pool_channel.avg", grad_check([&](const Tensor& v) { return P(pool_channel(v, PoolMode::Avg)); }, x));
  s.add("op.pool_channel.max",
        grad_check([&](const Tensor& v) { return P(pool_channel(v, PoolMode::Max)); }, distinct));

  s.add("op.bilinear.up", grad_check([&](const Tensor& v) { return P(bilinear_resize(v, 10, 7)); }, x));
  s.add("op.bilinear.down", grad_check([&](const Tensor& v) { return P(bilinear_resize(v, 2, 3)); }, x));

  const std::size_t k = 3, f = 2;
  auto logits = rng.uniform({k * k * f * f, 3, 2}, -1.0, 1.0);
  auto lr = rng.uniform({1, 3, 2}, -1.0, 1.0);
  s.add("op.convex_weights", grad_check([&](const Tensor& v) { return P(convex_weights(v, k, f)); }, logits));
  auto weights = convex_weights(logits, k, f).detach();
  s.add("op.convex_upsample.lr",
        grad_check([&](const Tensor& v) { return P(convex_upsample(v, weights, k, f)); }, lr));
  s.add("op.convex_upsample.weights",
        grad_check([&](const Tensor& v) { return P(convex_upsample(lr, v, k, f)); }, weights));
  auto tokens = rng.uniform({6, 3}, -1.0, 1.0);
  s.add("op.tokens_to_map", grad_check([&](const Tensor& v) { return P(tokens_to_map(v, 2, 3)); }, tokens));
  s.add("op.map_to_tokens", grad_check([&](const Tensor& v) { return P(map_to_tokens(v)); }, x));
}

void memory_module(Suite& s, Rng& rng, Projector& P) {
  const std::size_t d = 4;
  auto state = MemoryState::fresh(init_memory(d, rng));
  for (auto* m : {&state.mlp, &state.momentum})
    for (auto* t : {&m->w1, &m->b1, &m->w2, &m->b2}) *t = rng.uniform(t->shape(), -0.5, 0.5);
  auto hyper = MemoryHyper::constant(0.3, 0.6, 0.1, rng.uniform({d, d}, -0.5, 0.5),
                                     rng.uniform({d, d}, -0.5, 0.5), rng.uniform({d, d}, -0.5, 0.5));
  hyper.theta = rng.uniform({}, 0.2, 0.4);
  hyper.eta = rng.uniform({}, 0.4, 0.8);
  hyper.alpha = rng.uniform({}, 0.05, 0.2);
  auto x = rng.uniform({5, d}, -1.0, 1.0);
  auto project_state = [&](const MemoryState& st) {
    Tensor acc = Tensor::scalar(0.0);
    for (const auto& t : st.mlp.tensors()) acc = add(acc, P(t));
    for (const auto& t : st.momentum.tensors()) acc = add(acc, P(t));
    return acc;
  };
  s.add("memory.assoc_loss", grad_check([&](const Tensor& v) { return assoc_loss(state, hyper, v); }, x),
        kLossTol);
  s.add("memory.update.x",
        grad_check([&](const Tensor& v) { return project_state(memory_update(state, hyper, v)); }, x));
  std::vector<Tensor> leaves = state.mlp.tensors();
  for (const auto& t : state.momentum.tensors()) leaves.push_back(t);
  for (const auto& t : {hyper.theta, hyper.eta, hyper.alpha, hyper.w_k, hyper.w_v, hyper.w_q})
    leaves.push_back(t);
  s.add("memory.update.params",
        grad_check_params([&] { return project_state(memory_update(state, hyper, x)); }, leaves));
  s.add("memory.retrieve",
        grad_check([&](const Tensor& v) { return P(memory_retrieve(state, hyper, v)); }, x));
  // Two chained steps: gradients flow through the first update into the second.
  s.add("memory.update.chained", grad_check(
                                     [&](const Tensor& v) {
                                       auto s1 = memory_update(state, hyper, v);
                                       auto s2 = memory_update(s1, hyper, v);
                                       return P(memory_retrieve(s2, hyper, v));
                                     },
                                     x));
}

void titans_block(Suite& s, Rng& rng, Projector& P) {
  for (bool with_memory : {false, true}) {
    TitansBlock block(8, 2, 3, 2, with_memory, 2, rng);
    ParamList params;
    block.collect("block", params);
    jitter(params, rng, 0.2);
    auto x = rng.uniform({7, 8}, -1.0, 1.0);
    const std::string tag = with_memory ? "titans_block.memory" : "titans_block.plain";
    s.add(tag + ".x", grad_check([&](const Tensor& v) { return P(block.forward(v)); }, x));
    s.add(tag + ".params",
          grad_check_params([&] { return P(block.forward(x)); }, tensors_of(params), 1e-5, 6));
  }
}

void adapter_stage(Suite& s, Rng& rng, Projector& P) {
  const std::size_t C = 8;
  AdapterStage stage(C, 2, 2, 0.5, rng);
  ParamList params;
  stage.collect("stage", params);
  jitter(params, rng, 0.2);
  const auto layout = ScaleLayout::for_image(16, 16, 8);  // 8x8, 4x4, 2x2, 1x1
  auto c = rng.uniform({layout.total_tokens(), C}, -1.0, 1.0);
  auto f = rng.uniform({4, C}, -1.0, 1.0);
  s.add("adapter.inject.f", grad_check([&](const Tensor& v) { return P(stage.inject(v, c)); }, f));
  s.add("adapter.inject.c", grad_check([&](const Tensor& v) { return P(stage.inject(f, v)); }, c));
  s.add("adapter.extract.c", grad_check([&](const Tensor& v) { return P(stage.extract(v, f, layout)); }, c));
  s.add("adapter.extract.f", grad_check([&](const Tensor& v) { return P(stage.extract(c, v, layout)); }, f));
  s.add("adapter.params", grad_check_params(
                              [&] {
                                auto fh = stage.inject(f, c);
                                return add(P(fh), P(stage.extract(c, fh, layout)));
                              },
                              tensors_of(params), 1e-5, 6));
}

void tscbam(Suite& s, Rng& rng, Projector& P) {
  const std::size_t C = 4;
  CbamParams params(C, rng);
  ParamList list;
  params.collect("cbam", list, true);
  jitter(list, rng, 0.2);
  auto f1 = rng.uniform({C, 4, 3}, -1.0, 1.0);
  auto f2 = rng.uniform({C, 4, 3}, -1.0, 1.0);
  for (auto [variant, tag] : {std::pair{CbamVariant::Sum, "sum"}, std::pair{CbamVariant::Diff, "diff"},
                              std::pair{CbamVariant::Conv, "conv"}}) {
    const std::string t = tag;
    s.add("tscbam." + t + ".f1",
          grad_check([&](const Tensor& v) { return P(ts_cbam_fuse(v, f2, params, variant)); }, f1));
    s.add("tscbam." + t + ".f2",
          grad_check([&](const Tensor& v) { return P(ts_cbam_fuse(f1, v, params, variant)); }, f2));
    s.add("tscbam." + t + ".params",
          grad_check_params([&] { return P(ts_cbam_fuse(f1, f2, params, variant)); }, tensors_of(list)));
  }
}

void decoder(Suite& s, Rng& rng, Projector& P) {
  for (auto kind : {UpsampleKind::Convex, UpsampleKind::Bilinear}) {
    DecoderConfig cfg;
    cfg.dim = 4;
    cfg.out_channels = 4;
    cfg.heads = 2;
    cfg.persistent = 1;
    cfg.ffn_ratio = 2;
    cfg.factor = 2;
    cfg.upsampling = kind;
    Decoder dec(cfg, rng);
    ParamList params;
    dec.collect("decoder", params);
    jitter(params, rng, 0.2);
    FeaturePyramid pyr;
    for (std::size_t j = 0; j < 4; ++j) {
      const std::size_t side = std::size_t{8} >> j;
      pyr[j] = rng.uniform({4, side, side}, -1.0, 1.0);
    }
    const std::string tag = kind == UpsampleKind::Convex ? "decoder.convex" : "decoder.bilinear";
    for (std::size_t j = 0; j < 4; ++j)
      s.add(tag + ".level" + std::to_string(j + 1), grad_check(
                                                        [&](const Tensor& v) {
                                                          auto p = pyr;
                                                          p[j] = v;
                                                          return P(dec(p));
                                                        },
                                                        pyr[j]));
    s.add(tag + ".params", grad_check_params([&] { return P(dec(pyr)); }, tensors_of(params), 1e-5, 3));
  }
}

void losses(Suite& s, Rng& rng) {
  auto pred = rng.uniform({4, 5}, 0.05, 0.95);
  auto target = Tensor({4, 5}, 0.0);
  for (auto& v : target.mutable_data()) v = rng.uniform01() < 0.4 ? 1.0 : 0.0;
  LossConfig cfg;
  cfg.lambda = 0.7;
  s.add("loss.bce", grad_check([&](const Tensor& v) { return bce_loss(v, target); }, pred), kLossTol);
  s.add("loss.dice", grad_check([&](const Tensor& v) { return dice_loss(v, target, 1.0); }, pred), kLossTol);
  s.add("loss.total", grad_check([&](const Tensor& v) { return total_loss(v, target, cfg); }, pred), kLossTol);
  auto logits = rng.uniform({4, 5}, -2.0, 2.0);
  s.add("loss.total.logits",
        grad_check([&](const Tensor& v) { return total_loss(sigmoid(v), target, cfg); }, logits), kLossTol);
}

}  // namespace

std::vector<OracleResult> run_gradient_oracles(std::uint64_t seed,
                                               const std::function<void(const OracleResult&)>& on_result) {
  Suite s;
  s.on_result = on_result;
  Rng rng(seed);
  Projector P(seed + 1);
  elementwise_ops(s, rng, P);
  structural_ops(s, rng, P);
  spatial_ops(s, rng, P);
  memory_module(s, rng, P);
  titans_block(s, rng, P);
  adapter_stage(s, rng, P);
  tscbam(s, rng, P);
  decoder(s, rng, P);
  losses(s, rng);
  return s.results;
}

}  // namespace ctitans

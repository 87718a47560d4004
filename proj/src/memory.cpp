#include "changetitans/memory.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "changetitans/serialize.hpp"

namespace ctitans {

namespace {

void check_width(const MemoryMLP& m, const Tensor& x, const char* op) {
  if (x.rank() != 2 || x.dim(1) != m.dim())
    throw ShapeError(std::string(op) + ": tokens " + to_string(x.shape()) +
                     " do not match memory width " + std::to_string(m.dim()));
}

}  // namespace

Tensor MemoryMLP::operator()(const Tensor& x) const {
  check_width(*this, x, "memory");
  auto y = add(matmul(tanh(add(matmul(x, w1), b1)), w2), b2);
  return residual ? add(y, x) : y;
}

void MemoryMLP::collect(const std::string& prefix, ParamList& out) const {
  out.emplace_back(join_name(prefix, "w1"), w1);
  out.emplace_back(join_name(prefix, "b1"), b1);
  out.emplace_back(join_name(prefix, "w2"), w2);
  out.emplace_back(join_name(prefix, "b2"), b2);
}

MemoryMLP init_memory(std::size_t dim, Rng& rng, bool residual) {
  MemoryMLP m;
  m.w1 = param(rng.normal({dim, dim}, 1.0 / std::sqrt(static_cast<Scalar>(dim))));
  m.b1 = param(Tensor::zeros({dim}));
  m.w2 = param(Tensor::zeros({dim, dim}));
  m.b2 = param(Tensor::zeros({dim}));
  m.residual = residual;
  return m;
}

MemoryMLP zeros_like(const MemoryMLP& like) {
  return MemoryMLP{Tensor::zeros(like.w1.shape()), Tensor::zeros(like.b1.shape()),
                   Tensor::zeros(like.w2.shape()), Tensor::zeros(like.b2.shape()),
                   like.residual};
}

MemoryState MemoryState::fresh(MemoryMLP initial) {
  MemoryState s;
  s.momentum = zeros_like(initial);
  s.mlp = std::move(initial);
  return s;
}

MemoryHyper MemoryHyper::constant(Scalar theta, Scalar eta, Scalar alpha, Tensor w_k, Tensor w_v,
                                  Tensor w_q) {
  MemoryHyper h;
  h.theta = Tensor::scalar(std::max(theta, 0.0));
  h.eta = Tensor::scalar(std::clamp(eta, 0.0, 1.0));
  h.alpha = Tensor::scalar(std::clamp(alpha, 0.0, 1.0));
  h.w_k = std::move(w_k);
  h.w_v = std::move(w_v);
  h.w_q = std::move(w_q);
  return h;
}

Tensor assoc_loss(const MemoryState& state, const MemoryHyper& hyper, const Tensor& x) {
  check_width(state.mlp, x, "assoc_loss");
  auto k = matmul(x, hyper.w_k);
  auto v = matmul(x, hyper.w_v);
  auto r = sub(state.mlp(k), v);
  return scale(sum(square(r)), 1.0 / static_cast<Scalar>(x.dim(0)));
}

MemoryMLP memory_grad(const MemoryState& state, const MemoryHyper& hyper, const Tensor& x) {
  check_width(state.mlp, x, "memory_grad");
  const auto& m = state.mlp;
  auto k = matmul(x, hyper.w_k);
  auto v = matmul(x, hyper.w_v);
  auto a = tanh(add(matmul(k, m.w1), m.b1));
  auto y = add(matmul(a, m.w2), m.b2);
  if (m.residual) y = add(y, k);
  auto dy = scale(sub(y, v), 2.0 / static_cast<Scalar>(x.dim(0)));
  auto dpre = mul(matmul(dy, transpose(m.w2)), sub(Tensor::scalar(1.0), square(a)));
  MemoryMLP g;
  g.w1 = matmul(transpose(k), dpre);
  g.b1 = sum_axis(dpre, 0);
  g.w2 = matmul(transpose(a), dy);
  g.b2 = sum_axis(dy, 0);
  g.residual = m.residual;
  return g;
}

MemoryState memory_update(const MemoryState& state, const MemoryHyper& hyper, const Tensor& x) {
  MemoryMLP g = memory_grad(state, hyper, x);
  if (hyper.detach_surprise) {
    g.w1 = g.w1.detach();
    g.b1 = g.b1.detach();
    g.w2 = g.w2.detach();
    g.b2 = g.b2.detach();
  }
  auto keep = sub(Tensor::scalar(1.0), hyper.alpha);
  auto step = [&](const Tensor& p, const Tensor& s, const Tensor& grad, Tensor& p_out,
                  Tensor& s_out) {
    s_out = sub(mul(hyper.eta, s), mul(hyper.theta, grad));
    p_out = add(mul(keep, p), s_out);
  };
  MemoryState next;
  next.mlp.residual = state.mlp.residual;
  next.momentum.residual = state.mlp.residual;
  step(state.mlp.w1, state.momentum.w1, g.w1, next.mlp.w1, next.momentum.w1);
  step(state.mlp.b1, state.momentum.b1, g.b1, next.mlp.b1, next.momentum.b1);
  step(state.mlp.w2, state.momentum.w2, g.w2, next.mlp.w2, next.momentum.w2);
  step(state.mlp.b2, state.momentum.b2, g.b2, next.mlp.b2, next.momentum.b2);
  next.step = state.step + 1;
  return next;
}

Tensor memory_retrieve(const MemoryState& state, const MemoryHyper& hyper, const Tensor& x) {
  check_width(state.mlp, x, "memory_retrieve");
  return state.mlp(matmul(x, hyper.w_q));
}

void save_memory_state(const std::filesystem::path& file, const MemoryState& state) {
  ParamList named;
  state.mlp.collect("mlp", named);
  state.momentum.collect("momentum", named);
  named.emplace_back("residual", Tensor::scalar(state.mlp.residual ? 1.0 : 0.0));
  named.emplace_back("step", Tensor::scalar(static_cast<Scalar>(state.step)));
  save_named_tensors(file, named);
}

MemoryState load_memory_state(const std::filesystem::path& file) {
  std::map<std::string, Tensor> by_name;
  for (auto& [name, t] : load_named_tensors(file)) by_name[name] = t;
  auto get = [&](const std::string& name) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError(file.string() + ": missing tensor " + name);
    return it->second;
  };
  MemoryState s;
  const bool residual = get("residual").item() != 0.0;
  s.mlp = MemoryMLP{get("mlp.w1"), get("mlp.b1"), get("mlp.w2"), get("mlp.b2"), residual};
  s.momentum = MemoryMLP{get("momentum.w1"), get("momentum.b1"), get("momentum.w2"),
                         get("momentum.b2"), residual};
  s.step = static_cast<std::uint64_t>(get("step").item());
  return s;
}

}  // namespace ctitans

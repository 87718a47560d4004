#include "changetitans/nn.hpp"

#include <cmath>

namespace ctitans {

Tensor Rng::normal(Shape shape, Scalar stddev) {
  std::normal_distribution<Scalar> dist(0.0, stddev);
  std::vector<Scalar> v(numel(shape));
  for (auto& x : v) x = dist(engine_);
  return Tensor(std::move(shape), std::move(v));
}

Tensor Rng::uniform(Shape shape, Scalar lo, Scalar hi) {
  std::uniform_real_distribution<Scalar> dist(lo, hi);
  std::vector<Scalar> v(numel(shape));
  for (auto& x : v) x = dist(engine_);
  return Tensor(std::move(shape), std::move(v));
}

Tensor param(Tensor t) {
  t.set_requires_grad(true);
  return t;
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias)
    : weight(param(rng.normal({in, out}, 1.0 / std::sqrt(static_cast<Scalar>(in))))) {
  if (with_bias) bias = param(Tensor::zeros({out}));
}

Tensor Linear::operator()(const Tensor& x) const {
  auto y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

void Linear::collect(const std::string& prefix, ParamList& out) const {
  out.emplace_back(join_name(prefix, "weight"), weight);
  if (bias.defined()) out.emplace_back(join_name(prefix, "bias"), bias);
}

void Linear::zero() {
  for (auto& v : weight.mutable_data()) v = 0;
  if (bias.defined())
    for (auto& v : bias.mutable_data()) v = 0;
}

LayerNorm::LayerNorm(std::size_t dim)
    : gamma(param(Tensor::ones({dim}))), beta(param(Tensor::zeros({dim}))) {}

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
  out.emplace_back(join_name(prefix, "gamma"), gamma);
  out.emplace_back(join_name(prefix, "beta"), beta);
}

Conv2d::Conv2d(std::size_t in, std::size_t out, std::size_t k, Rng& rng, std::size_t pad,
               bool with_bias)
    : weight(param(rng.normal({out, in, k, k}, std::sqrt(2.0 / static_cast<Scalar>(in * k * k))))),
      padding(pad) {
  if (with_bias) bias = param(Tensor::zeros({out}));
}

Conv2d Conv2d::make_depthwise(std::size_t channels, std::size_t k, Rng& rng, std::size_t pad) {
  Conv2d c;
  c.weight = param(rng.normal({channels, 1, k, k}, std::sqrt(2.0 / static_cast<Scalar>(k * k))));
  c.bias = param(Tensor::zeros({channels}));
  c.padding = pad;
  c.depthwise = true;
  return c;
}

Tensor Conv2d::operator()(const Tensor& x) const {
  return depthwise ? depthwise_conv2d(x, weight, bias, stride, padding, mode)
                   : conv2d(x, weight, bias, stride, padding, mode);
}

void Conv2d::collect(const std::string& prefix, ParamList& out) const {
  out.emplace_back(join_name(prefix, "weight"), weight);
  if (bias.defined()) out.emplace_back(join_name(prefix, "bias"), bias);
}

MultiHeadAttention::MultiHeadAttention(std::size_t dim, std::size_t h, Rng& rng)
    : q(dim, dim, rng), k(dim, dim, rng), v(dim, dim, rng), o(dim, dim, rng), heads(h) {
  if (h == 0 || dim % h != 0)
    throw ShapeError("attention: dim " + std::to_string(dim) + " not divisible by " +
                     std::to_string(h) + " heads");
}

Tensor MultiHeadAttention::operator()(const Tensor& queries, const Tensor& context,
                                      Tensor* weights) const {
  const std::size_t n = queries.dim(0), m = context.dim(0), C = queries.dim(1);
  if (context.dim(1) != C)
    throw ShapeError("attention: query " + to_string(queries.shape()) + " and context " +
                     to_string(context.shape()) + " widths differ");
  const std::size_t dh = C / heads;
  auto split = [&](const Tensor& t, std::size_t rows) {
    return permute(reshape(t, {rows, heads, dh}), {1, 0, 2});
  };
  auto Q = split(q(queries), n);
  auto K = split(k(context), m);
  auto V = split(v(context), m);
  auto scores = scale(matmul(Q, transpose(K)), 1.0 / std::sqrt(static_cast<Scalar>(dh)));
  auto attn = softmax(scores, 2);
  if (weights) *weights = attn;
  auto mixed = reshape(permute(matmul(attn, V), {1, 0, 2}), {n, C});
  return o(mixed);
}

void MultiHeadAttention::collect(const std::string& prefix, ParamList& out) const {
  q.collect(join_name(prefix, "q"), out);
  k.collect(join_name(prefix, "k"), out);
  v.collect(join_name(prefix, "v"), out);
  o.collect(join_name(prefix, "o"), out);
}

}  // namespace ctitans

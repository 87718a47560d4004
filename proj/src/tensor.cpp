#include "changetitans/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

namespace ctitans {

namespace {
thread_local bool g_grad_enabled = true;
thread_local std::uint64_t g_seq = 0;
thread_local std::vector<std::uint64_t> g_last_order;
}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, Scalar fill) : node_(std::make_shared<Node>()) {
  for (auto e : shape)
    if (e == 0) throw ShapeError("zero extent in shape " + to_string(shape));
  node_->data.assign(ctitans::numel(shape), fill);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<Scalar> values) : node_(std::make_shared<Node>()) {
  for (auto e : shape)
    if (e == 0) throw ShapeError("zero extent in shape " + to_string(shape));
  if (ctitans::numel(shape) != values.size())
    throw ShapeError("shape " + to_string(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  node_->shape = std::move(shape);
  node_->data = std::move(values);
}

Tensor Tensor::scalar(Scalar v) { return Tensor(Shape{}, std::vector<Scalar>{v}); }

Scalar Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return node_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

std::vector<Scalar> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<Scalar>(node_->data.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

void Tensor::backward() const { Tape::backward(*this); }

Tensor Tensor::detach() const {
  auto n = std::make_shared<Node>();
  n->shape = node_->shape;
  n->data = node_->data;
  return Tensor(std::move(n));
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

std::uint64_t Tape::next_seq() { return ++g_seq; }
std::uint64_t Tape::current() { return g_seq; }

const std::vector<std::uint64_t>& Tape::last_visit_order() { return g_last_order; }

void Tape::backward(const Tensor& root) {
  if (!root.defined()) throw std::invalid_argument("backward on undefined tensor");
  if (root.numel() != 1)
    throw ShapeError("backward requires a scalar root, got " + to_string(root.shape()));
  g_last_order.clear();
  if (!root.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.node().get()};
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    if (!n->backward) continue;
    order.push_back(n);
    for (auto& in : n->inputs)
      if (in->requires_grad) stack.push_back(in.get());
  }
  std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->seq > b->seq; });

  // Interior gradients are per-sweep; leaf gradients accumulate.
  for (Node* n : order) n->grad.clear();
  root.node()->ensure_grad()[0] += 1.0;
  for (Node* n : order) {
    g_last_order.push_back(n->seq);
    if (n->grad.empty()) continue;
    n->backward(*n);
  }
}

Tensor make_result(Shape shape, std::vector<Scalar> data, std::vector<Tensor> inputs,
                   BackwardFn backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  bool needs = false;
  if (GradMode::enabled())
    for (const auto& t : inputs)
      if (t.requires_grad()) needs = true;
  if (needs) {
    n->requires_grad = true;
    n->seq = Tape::next_seq();
    n->inputs.reserve(inputs.size());
    for (auto& t : inputs) n->inputs.push_back(t.node());
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

bool all_finite(const Tensor& t) {
  for (auto v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

std::uint64_t checksum(const Tensor& t) {
  std::uint64_t h = 1469598103934665603ULL;
  for (auto v : t.data()) {
    unsigned char bytes[sizeof(Scalar)];
    std::memcpy(bytes, &v, sizeof(Scalar));
    for (auto b : bytes) {
      h ^= b;
      h *= 1099511628211ULL;
    }
  }
  return h;
}

}  // namespace ctitans

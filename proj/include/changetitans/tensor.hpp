#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ctitans {

/// All numerics run in 64-bit so finite-difference tolerances stay meaningful.
using Scalar = double;
using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

struct Node;
using BackwardFn = std::function<void(Node&)>;

/// Storage and tape record of one tensor value.
struct Node {
  Shape shape;
  std::vector<Scalar> data;
  std::vector<Scalar> grad;
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;

  std::vector<Scalar>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), Scalar{0});
    return grad;
  }
};

/// Dense row-major tensor handle. Copies share storage; values are immutable
/// once produced by an op, only gradients accumulate.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = 0);
  Tensor(Shape shape, std::vector<Scalar> values);

  static Tensor scalar(Scalar v);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const Scalar> data() const { return node_->data; }
  /// Writable view; only meaningful for leaves (parameters, inputs).
  std::span<Scalar> mutable_data() { return node_->data; }
  std::vector<Scalar> to_vector() const { return node_->data; }
  Scalar item() const;
  Scalar operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  /// Gradient values; zeros if nothing has been accumulated yet.
  std::vector<Scalar> grad() const;
  std::span<Scalar> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad();

  /// Reverse-mode sweep from this scalar.
  void backward() const;
  /// Same values, cut from the tape.
  Tensor detach() const;

  const std::shared_ptr<Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<Node> node_;
};

/// Global on/off switch for recording (per thread).
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Ordered record of differentiable ops executed on this thread. Every op
/// result takes the next sequence number; backward visits reachable nodes in
/// strictly decreasing sequence order.
class Tape {
 public:
  static std::uint64_t next_seq();
  static std::uint64_t current();
  /// Runs the backward sweep rooted at `root` (seed gradient 1).
  static void backward(const Tensor& root);
  /// Sequence numbers in the order the last backward visited them.
  static const std::vector<std::uint64_t>& last_visit_order();
};

/// Creates an op result. The backward closure is recorded only when recording
/// is enabled and some input requires grad.
Tensor make_result(Shape shape, std::vector<Scalar> data, std::vector<Tensor> inputs,
                   BackwardFn backward);

bool all_finite(const Tensor& t);
/// Bitwise checksum over the values (FNV-1a over the raw bytes).
std::uint64_t checksum(const Tensor& t);

}  // namespace ctitans

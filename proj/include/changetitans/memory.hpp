#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "changetitans/nn.hpp"

namespace ctitans {

/// Two-layer memory network M: R^d -> R^d,
///   M(x) = tanh(x W1 + b1) W2 + b2   (+ x when `residual` is set).
/// The same struct doubles as a parameter-shaped buffer (momentum, gradient).
struct MemoryMLP {
  Tensor w1, b1, w2, b2;
  bool residual = false;

  std::size_t dim() const { return w1.dim(0); }
  Tensor operator()(const Tensor& x) const;
  std::vector<Tensor> tensors() const { return {w1, b1, w2, b2}; }
  void collect(const std::string& prefix, ParamList& out) const;
};

/// Hidden layer random, output layer zero: the initial memory maps
/// everything to zero (or to the identity with `residual`).
MemoryMLP init_memory(std::size_t dim, Rng& rng, bool residual = false);
/// Same shapes as `like`, all zeros.
MemoryMLP zeros_like(const MemoryMLP& like);

/// Inner-loop state: the current memory and its momentum (past surprise).
struct MemoryState {
  MemoryMLP mlp;
  MemoryMLP momentum;
  std::uint64_t step = 0;

  static MemoryState fresh(MemoryMLP initial);
};

/// Update-rule coefficients and projections. theta/eta/alpha are rank-0
/// tensors so that learnable parameterizations stay on the tape.
struct MemoryHyper {
  Tensor theta;  // learning rate, >= 0
  Tensor eta;    // momentum decay, [0,1]
  Tensor alpha;  // forgetting rate, [0,1]
  Tensor w_k, w_v, w_q;  // [d, d]; rows are tokens, so k = x W_k
  /// Stops the gradient at the surprise term (first-order outer loop).
  bool detach_surprise = false;

  /// Fixed coefficients; eta and alpha are clamped into [0,1], theta to >= 0.
  static MemoryHyper constant(Scalar theta, Scalar eta, Scalar alpha, Tensor w_k, Tensor w_v,
                              Tensor w_q);
};

/// Mean over the n rows of x of ||M(x W_k) - x W_v||^2.
Tensor assoc_loss(const MemoryState& state, const MemoryHyper& hyper, const Tensor& x);
/// Gradient of assoc_loss w.r.t. the memory parameters, built from
/// differentiable ops so outer-loop gradients can flow through it.
MemoryMLP memory_grad(const MemoryState& state, const MemoryHyper& hyper, const Tensor& x);
/// momentum' = eta*momentum - theta*grad; params' = (1-alpha)*params + momentum'.
/// Returns a new state; `state` is untouched.
MemoryState memory_update(const MemoryState& state, const MemoryHyper& hyper, const Tensor& x);
/// M(x W_q); pure.
Tensor memory_retrieve(const MemoryState& state, const MemoryHyper& hyper, const Tensor& x);

void save_memory_state(const std::filesystem::path& file, const MemoryState& state);
MemoryState load_memory_state(const std::filesystem::path& file);

}  // namespace ctitans

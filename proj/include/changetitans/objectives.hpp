#pragma once

#include "changetitans/ops.hpp"

namespace ctitans {

struct LossConfig {
  Scalar lambda = 1.0;   // Dice weight
  Scalar epsilon = 1.0;  // Dice smoothing, > 0
};

/// Predictions are clamped into [kProbClamp, 1 - kProbClamp] before the log.
inline constexpr Scalar kProbClamp = 1e-7;

/// Mean binary cross-entropy of probabilities `pred` against a {0,1} target.
Tensor bce_loss(const Tensor& pred, const Tensor& target);
/// 1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)
Tensor dice_loss(const Tensor& pred, const Tensor& target, Scalar eps);
/// bce + lambda * dice
Tensor total_loss(const Tensor& pred, const Tensor& target, const LossConfig& cfg);

}  // namespace ctitans

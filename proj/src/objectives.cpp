#include "changetitans/objectives.hpp"

namespace ctitans {

namespace {

void check_pair(const Tensor& pred, const Tensor& target, const char* op) {
  if (pred.shape() != target.shape())
    throw ShapeError(std::string(op) + ": prediction " + to_string(pred.shape()) +
                     " and target " + to_string(target.shape()) + " differ");
}

}  // namespace

Tensor bce_loss(const Tensor& pred, const Tensor& target) {
  check_pair(pred, target, "bce");
  auto p = clamp(pred, kProbClamp, 1.0 - kProbClamp);
  auto one = Tensor::scalar(1.0);
  auto ll = add(mul(target, log(p)), mul(sub(one, target), log(sub(one, p))));
  return neg(mean(ll));
}

Tensor dice_loss(const Tensor& pred, const Tensor& target, Scalar eps) {
  check_pair(pred, target, "dice");
  if (!(eps > 0)) throw std::invalid_argument("dice: epsilon must be positive");
  auto inter = add_scalar(scale(sum(mul(pred, target)), 2.0), eps);
  auto denom = add_scalar(add(sum(pred), sum(target)), eps);
  return sub(Tensor::scalar(1.0), div(inter, denom));
}

Tensor total_loss(const Tensor& pred, const Tensor& target, const LossConfig& cfg) {
  auto b = bce_loss(pred, target);
  if (cfg.lambda == 0.0) return b;
  return add(b, scale(dice_loss(pred, target, cfg.epsilon), cfg.lambda));
}

}  // namespace ctitans

#include "changetitans/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace ctitans {

namespace {

Scalar rel_err(Scalar a, Scalar n) {
  return std::abs(a - n) / std::max({1.0, std::abs(a), std::abs(n)});
}

Scalar eval_scalar(const std::function<Tensor()>& f) {
  NoGradGuard guard;
  return f().item();
}

}  // namespace

Scalar grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, Scalar eps) {
  Tensor leaf(x.shape(), x.to_vector());
  leaf.set_requires_grad(true);
  return grad_check_params([&] { return f(leaf); }, {leaf}, eps, 0);
}

Scalar grad_check_params(const std::function<Tensor()>& f, std::vector<Tensor> params,
                         Scalar eps, std::size_t max_elems) {
  for (auto& p : params) {
    p.zero_grad();
    p.set_requires_grad(true);
  }
  {
    Tensor y = f();
    y.backward();
  }
  Scalar worst = 0;
  for (auto& p : params) {
    const auto analytic = p.grad();
    auto values = p.mutable_data();
    const std::size_t n = values.size();
    const std::size_t probes = (max_elems == 0 || max_elems >= n) ? n : max_elems;
    for (std::size_t q = 0; q < probes; ++q) {
      const std::size_t i = probes == n ? q : (q * n) / probes;
      const Scalar orig = values[i];
      values[i] = orig + eps;
      const Scalar up = eval_scalar(f);
      values[i] = orig - eps;
      const Scalar down = eval_scalar(f);
      values[i] = orig;
      const Scalar numeric = (up - down) / (2 * eps);
      worst = std::max(worst, rel_err(analytic[i], numeric));
    }
  }
  for (auto& p : params) p.zero_grad();
  return worst;
}

}  // namespace ctitans

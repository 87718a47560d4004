#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "changetitans/tensor.hpp"

namespace ctitans {

/// Central-difference check of a scalar function at x. Returns
/// max_i |a_i - n_i| / max(1, |a_i|, |n_i|) over all elements, where a is the
/// tape gradient and n the numerical one.
Scalar grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  Scalar eps = 1e-5);

/// Same measure, but perturbs leaf tensors in place (parameters of a module
/// closure). At most `max_elems` entries per tensor are probed, spread evenly;
/// 0 probes everything. Gradients of `params` are cleared before and after.
Scalar grad_check_params(const std::function<Tensor()>& f, std::vector<Tensor> params,
                         Scalar eps = 1e-5, std::size_t max_elems = 0);

}  // namespace ctitans

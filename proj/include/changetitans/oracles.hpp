#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "changetitans/tensor.hpp"

namespace ctitans {

struct OracleResult {
  std::string name;
  Scalar error = 0;
  Scalar threshold = 0;
  bool pass() const { return error < threshold; }
};

/// Finite-difference checks of every differentiable op and of the composite
/// modules (memory step, Titans block, adapter stage, TS-CBAM, decoder,
/// losses). Non-scalar outputs are reduced with a fixed random projection.
/// Thresholds: 1e-4, and 1e-5 for scalar losses.
std::vector<OracleResult> run_gradient_oracles(std::uint64_t seed = 7,
                                               const std::function<void(const OracleResult&)>& on_result = {});

}  // namespace ctitans

#pragma once

#include "r2moe/numerics.hpp"

#include <vector>

namespace r2moe::testing {

/// Finite-difference checks of every analytic gradient: gating MLP, compose_weight (through selection),
/// cross-attention, the denoising loss, and the full task objective including routing distillation.
std::vector<GradCheckReport> gradient_suite(int probes, std::uint64_t seed);

}  // namespace r2moe::testing

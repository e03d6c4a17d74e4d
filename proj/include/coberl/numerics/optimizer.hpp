#pragma once

#include <cstdint>

#include "coberl/numerics/parameters.hpp"

namespace coberl::numerics {

struct AdamHyperParams {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
};

/// Per-parameter first/second moments and the shared step counter.
struct AdamState {
  AdamHyperParams hyper;
  std::uint64_t step = 0;
  GradientMap first_moment;
  GradientMap second_moment;

  explicit AdamState(AdamHyperParams h = {}) : hyper(h) {}
};

/// Bias-corrected Adam. Returns the updated set with its version bumped.
/// Throws ConfigError if grads and params are keyed differently, and
/// NumericError naming the first parameter whose gradient is not finite.
ParameterSet adam_step(const ParameterSet& params, const GradientMap& grads, AdamState& state);

double global_norm(const GradientMap& grads);

/// Rescales every tensor by max_norm / g when the global L2 norm g exceeds max_norm.
GradientMap clip_global_norm(const GradientMap& grads, double max_norm);

}  // namespace coberl::numerics

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "coberl/numerics/parameters.hpp"

namespace coberl::numerics {

/// Builds a scalar loss on the binding's tape. Must be deterministic.
using GraphLoss = std::function<Var(ParameterBinding&)>;

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;
  double max_rel_error = 0.0;
  bool passed = false;
};

struct GradCheckOptions {
  double step = 1e-5;
  /// Denominator floor: rel = |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
  /// Only check these parameters when non-empty.
  std::vector<std::string> only;
};

/// Compares reverse-mode gradients with central finite differences.
/// stop_gradient() results are held at their base-point values while probing.
/// Throws HarnessError when two evaluations at the same point disagree.
GradCheckReport grad_check(const GraphLoss& loss, const ParameterSet& params, double tol,
                           const GradCheckOptions& options = {});

/// Evaluates the loss without recording gradients.
double evaluate_loss(const GraphLoss& loss, const ParameterSet& params);

}  // namespace coberl::numerics

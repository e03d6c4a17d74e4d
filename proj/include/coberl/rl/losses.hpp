#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "coberl/config.hpp"
#include "coberl/numerics/tape.hpp"

namespace coberl::rl {

struct ValueTransform {
  TransformKind kind = TransformKind::kSignedSqrt;
  double epsilon = 1e-3;
};

/// h(x) = sign(x)(sqrt(|x|+1) - 1) + eps*x, or identity.
double transform(double v, const ValueTransform& t);
double inverse_transform(double v, const ValueTransform& t);

/// Backward recursion in raw space:
///   G_T = 0 if the trace ends on a terminal step, else q_next_max[T];
///   G_t = r_t + gamma * [(1 - lambda) * q_next_max[t+1] + lambda * G_{t+1}], with G_t = r_t when terminal[t].
/// `target_q_max` has T+1 entries; entry t is the bootstrap value of the state at step t.
std::vector<double> peng_targets(std::span<const double> rewards, std::span<const double> target_q_max,
                                 std::span<const std::uint8_t> terminal, double lambda, double discount);

struct QLambdaLoss {
  numerics::Var loss;       // scalar
  std::vector<double> td;   // per row; zero on invalid rows
};

/// Rows of `online_q` are ([B*T, A], sequence-major); `targets_raw`, `actions`,
/// `weights` (IS weight per row) and `valid` have B*T entries.
/// loss = sum_valid(w * 0.5 * delta^2) / count_valid.
QLambdaLoss q_lambda_loss(numerics::Var online_q, std::span<const std::size_t> actions,
                          std::span<const double> targets_raw, std::span<const double> weights,
                          std::span<const std::uint8_t> valid, const ValueTransform& t);

/// Single-trace value form with unit weights.
struct QLambdaValue {
  double loss = 0.0;
  std::vector<double> td;
};
QLambdaValue q_lambda_loss(const numerics::Tensor& online_q, std::span<const std::size_t> actions,
                           std::span<const double> targets_raw, const ValueTransform& t,
                           std::span<const double> weights = {});

/// eta * max|delta| + (1 - eta) * mean|delta|.
double priority_from_tds(std::span<const double> td, double eta);

}  // namespace coberl::rl

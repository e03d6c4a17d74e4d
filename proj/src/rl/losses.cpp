#include "coberl/rl/losses.hpp"

#include <cmath>

#include "coberl/error.hpp"

namespace coberl::rl {

double transform(double v, const ValueTransform& t) {
  if (t.kind == TransformKind::kIdentity) return v;
  const double s = v < 0 ? -1.0 : (v > 0 ? 1.0 : 0.0);
  return s * (std::sqrt(std::abs(v) + 1.0) - 1.0) + t.epsilon * v;
}

double inverse_transform(double v, const ValueTransform& t) {
  if (t.kind == TransformKind::kIdentity) return v;
  const double s = v < 0 ? -1.0 : (v > 0 ? 1.0 : 0.0);
  const double e = t.epsilon;
  const double root = (std::sqrt(1.0 + 4.0 * e * (std::abs(v) + 1.0 + e)) - 1.0) / (2.0 * e);
  return s * (root * root - 1.0);
}

std::vector<double> peng_targets(std::span<const double> rewards, std::span<const double> target_q_max,
                                 std::span<const std::uint8_t> terminal, double lambda, double discount) {
  const std::size_t T = rewards.size();
  if (target_q_max.size() != T + 1 || terminal.size() != T)
    throw InputError("peng_targets: expected " + std::to_string(T + 1) + " bootstraps and " + std::to_string(T) +
                     " terminal flags");
  if (lambda < 0 || lambda > 1 || discount < 0 || discount > 1)
    throw ConfigError("peng_targets: lambda and discount must lie in [0, 1]");
  std::vector<double> g(T);
  double next = target_q_max[T];
  for (std::size_t k = T; k-- > 0;) {
    if (terminal[k]) {
      g[k] = rewards[k];
    } else {
      g[k] = rewards[k] + discount * ((1.0 - lambda) * target_q_max[k + 1] + lambda * next);
    }
    next = g[k];
  }
  return g;
}

QLambdaLoss q_lambda_loss(numerics::Var online_q, std::span<const std::size_t> actions,
                          std::span<const double> targets_raw, std::span<const double> weights,
                          std::span<const std::uint8_t> valid, const ValueTransform& t) {
  using namespace numerics;
  const std::size_t N = online_q.rows();
  if (actions.size() != N || targets_raw.size() != N || weights.size() != N || valid.size() != N)
    throw InputError("q_lambda_loss: expected " + std::to_string(N) + " entries per input");
  for (std::size_t a : actions)
    if (a >= online_q.cols()) throw InputError("q_lambda_loss: action out of range");
  Tape& tape = *online_q.tape;
  Var chosen = gather_cols(online_q, actions);
  Tensor target({N, 1}), w({N, 1});
  std::size_t count = 0;
  for (std::size_t i = 0; i < N; ++i) {
    if (!valid[i]) continue;
    target[i] = transform(targets_raw[i], t);
    w[i] = weights[i];
    ++count;
  }
  QLambdaLoss r;
  r.td.assign(N, 0.0);
  for (std::size_t i = 0; i < N; ++i)
    if (valid[i]) r.td[i] = target[i] - chosen.value()[i];
  Var delta = sub(tape.constant(std::move(target)), chosen);
  Var per = mul(mul(delta, delta), tape.constant(std::move(w)));
  r.loss = scale(sum_all(per), count ? 0.5 / static_cast<double>(count) : 0.0);
  return r;
}

QLambdaValue q_lambda_loss(const numerics::Tensor& online_q, std::span<const std::size_t> actions,
                           std::span<const double> targets_raw, const ValueTransform& t,
                           std::span<const double> weights) {
  numerics::Tape tape(false);
  const std::size_t N = actions.size();
  if (N == 0 || online_q.size() % N != 0) throw InputError("q_lambda_loss: Q shape does not match actions");
  std::vector<double> w(weights.begin(), weights.end());
  if (w.empty()) w.assign(N, 1.0);
  std::vector<std::uint8_t> valid(N, 1);
  auto r = q_lambda_loss(tape.constant(online_q.reshaped({N, online_q.size() / N})), actions, targets_raw, w, valid, t);
  return {r.loss.value()[0], std::move(r.td)};
}

double priority_from_tds(std::span<const double> td, double eta) {
  if (td.empty()) throw InputError("priority_from_tds: empty TD vector");
  double mx = 0.0, sum = 0.0;
  for (double d : td) {
    mx = std::max(mx, std::abs(d));
    sum += std::abs(d);
  }
  return eta * mx + (1.0 - eta) * sum / static_cast<double>(td.size());
}

}  // namespace coberl::rl

#include "coberl/numerics/optimizer.hpp"

#include <cmath>

#include "coberl/error.hpp"

namespace coberl::numerics {

ParameterSet adam_step(const ParameterSet& params, const GradientMap& grads, AdamState& state) {
  if (grads.size() != params.size()) {
    throw ConfigError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                      std::to_string(params.size()) + " parameters");
  }
  for (const auto& [name, value] : params.entries()) {
    auto it = grads.find(name);
    if (it == grads.end()) throw ConfigError("adam_step: missing gradient for '" + name + "'");
    if (it->second.size() != value.size()) throw ConfigError("adam_step: gradient shape mismatch for '" + name + "'");
    if (!it->second.all_finite()) throw NumericError("adam_step: non-finite gradient for '" + name + "'");
  }

  const auto& h = state.hyper;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(h.beta1, t);
  const double c2 = 1.0 - std::pow(h.beta2, t);

  ParameterSet out = params;
  for (auto& [name, value] : out.entries()) {
    const Tensor& g = grads.find(name)->second;
    auto [m_it, m_new] = state.first_moment.try_emplace(name, value.shape());
    auto [v_it, v_new] = state.second_moment.try_emplace(name, value.shape());
    Tensor& m = m_it->second;
    Tensor& v = v_it->second;
    for (std::size_t i = 0; i < value.size(); ++i) {
      m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
      v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      value[i] -= h.learning_rate * m_hat / (std::sqrt(v_hat) + h.epsilon);
    }
  }
  out.bump_version();
  return out;
}

double global_norm(const GradientMap& grads) {
  double ss = 0.0;
  for (const auto& [_, g] : grads) ss += sum_of_squares(g);
  return std::sqrt(ss);
}

GradientMap clip_global_norm(const GradientMap& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("clip_global_norm: max_norm must be positive");
  const double norm = global_norm(grads);
  // The slack absorbs rounding in the rescaled norm, so clipping is idempotent.
  if (norm <= max_norm * (1.0 + 1e-12)) return grads;
  const double factor = max_norm / norm;
  GradientMap out = grads;
  for (auto& [_, g] : out)
    for (double& v : g.values()) v *= factor;
  return out;
}

}  // namespace coberl::numerics

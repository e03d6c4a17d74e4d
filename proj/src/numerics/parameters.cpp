#include "coberl/numerics/parameters.hpp"

#include <cmath>

#include "coberl/error.hpp"

namespace coberl::numerics {

void ParameterSet::add(std::string name, Tensor value) {
  if (value.rank() != 2) value = value.reshaped({value.rows(), value.cols()});
  auto [it, inserted] = params_.emplace(std::move(name), std::move(value));
  if (!inserted) throw ConfigError("duplicate parameter name '" + it->first + "'");
}

const Tensor& ParameterSet::at(std::string_view name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter '" + std::string(name) + "'");
  return it->second;
}

Tensor& ParameterSet::at(std::string_view name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter '" + std::string(name) + "'");
  return it->second;
}

std::vector<std::string> ParameterSet::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, _] : params_) out.push_back(name);
  return out;
}

std::size_t ParameterSet::num_scalars() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.size();
  return n;
}

bool ParameterSet::same_values(const ParameterSet& other) const {
  if (params_.size() != other.params_.size()) return false;
  for (const auto& [name, t] : params_) {
    auto it = other.params_.find(name);
    if (it == other.params_.end() || !(it->second == t)) return false;
  }
  return true;
}

Var ParameterBinding::operator()(std::string_view name) {
  if (auto it = bound_.find(name); it != bound_.end()) return it->second;
  Var v = tape_->leaf(params_->at(name), trainable_);
  bound_.emplace(std::string(name), v);
  return v;
}

GradientMap ParameterBinding::gradients() const {
  GradientMap out;
  for (const auto& [name, value] : params_->entries()) {
    auto it = bound_.find(name);
    out.emplace(name, it == bound_.end() ? Tensor(value.shape()) : tape_->grad(it->second));
  }
  return out;
}

Tensor truncated_normal(std::size_t rows, std::size_t cols, std::size_t fan_in, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  Tensor out({rows, cols});
  for (double& v : out.values()) {
    double z = normal(rng);
    while (std::abs(z) > 2.0) z = normal(rng);
    v = z * stddev;
  }
  return out;
}

}  // namespace coberl::numerics

#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "coberl/numerics/tape.hpp"
#include "coberl/numerics/tensor.hpp"

namespace coberl::numerics {

using Rng = std::mt19937_64;
using GradientMap = std::map<std::string, Tensor, std::less<>>;

/// Named model parameters plus a version counter that the optimizer bumps.
class ParameterSet {
 public:
  ParameterSet() = default;

  /// Adds a new parameter; throws ConfigError on a duplicate name.
  void add(std::string name, Tensor value);
  bool contains(std::string_view name) const { return params_.find(name) != params_.end(); }
  const Tensor& at(std::string_view name) const;
  Tensor& at(std::string_view name);

  const std::map<std::string, Tensor, std::less<>>& entries() const noexcept { return params_; }
  std::map<std::string, Tensor, std::less<>>& entries() noexcept { return params_; }
  std::vector<std::string> names() const;
  std::size_t size() const noexcept { return params_.size(); }
  std::size_t num_scalars() const;

  std::uint64_t version() const noexcept { return version_; }
  void set_version(std::uint64_t v) noexcept { version_ = v; }
  void bump_version() noexcept { ++version_; }

  bool same_values(const ParameterSet& other) const;

 private:
  std::map<std::string, Tensor, std::less<>> params_;
  std::uint64_t version_ = 0;
};

/// Binds a ParameterSet onto a Tape, creating leaf nodes on first use.
///
/// Tracks which names were read, so callers can assert that a parameter
/// (e.g. the mask token) was never consulted on some path.
class ParameterBinding {
 public:
  ParameterBinding(Tape& tape, const ParameterSet& params, bool trainable = true)
      : tape_(&tape), params_(&params), trainable_(trainable) {}

  Var operator()(std::string_view name);
  Tape& tape() const noexcept { return *tape_; }
  const ParameterSet& params() const noexcept { return *params_; }
  bool accessed(std::string_view name) const { return bound_.find(name) != bound_.end(); }

  /// Gradients for every parameter in the set; unread ones are zero.
  GradientMap gradients() const;

 private:
  Tape* tape_;
  const ParameterSet* params_;
  bool trainable_;
  std::map<std::string, Var, std::less<>> bound_;
};

/// Truncated normal (cut at two standard deviations) with stddev 1/sqrt(fan_in).
Tensor truncated_normal(std::size_t rows, std::size_t cols, std::size_t fan_in, Rng& rng);

}  // namespace coberl::numerics

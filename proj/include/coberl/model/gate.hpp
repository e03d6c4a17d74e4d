#pragma once

#include <string>

#include "coberl/numerics/parameters.hpp"

namespace coberl::core {

using numerics::ParameterBinding;
using numerics::ParameterSet;
using numerics::Rng;
using numerics::Tensor;
using numerics::Var;

/// GRU-type gate g(y, x) = (1 - z) * y + z * h_hat with
///   z = sigmoid(W_z x + U_z y - b_g), r = sigmoid(W_r x + U_r y),
///   h_hat = tanh(W_g x + U_g (r * y)).
/// Vectors are rows, so "W x" is computed as x * W with W stored [d, d].
struct GateParameters {
  Tensor w_z, u_z, w_g, u_g, w_r, u_r;
  Tensor b_g;  // [1, d]

  static GateParameters zeros(std::size_t d, double bias);
  static GateParameters random(std::size_t d, double bias, Rng& rng);
  static GateParameters from(const ParameterSet& params, const std::string& prefix);
  void add_to(ParameterSet& params, const std::string& prefix) const;
  std::size_t width() const { return b_g.cols(); }
};

/// Graph form over rows of y and x (both [N, d]).
Var gate(ParameterBinding& p, const std::string& prefix, Var y, Var x);

/// Value form; y and x are [N, d] (or rank-1 of width d). Width mismatch throws ConfigError.
Tensor gru_gate(const Tensor& y, const Tensor& x, const GateParameters& params);

/// Position-wise gate over two sequences [T, d]. Length mismatch throws InputError.
Tensor combine(const Tensor& y_seq, const Tensor& x_seq, const GateParameters& params);

}  // namespace coberl::core

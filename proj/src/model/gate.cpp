#include "coberl/model/gate.hpp"

#include "coberl/error.hpp"

namespace coberl::core {

namespace {

constexpr const char* kNames[] = {"w_z", "u_z", "w_g", "u_g", "w_r", "u_r"};

Tensor* field(GateParameters& g, int i) {
  Tensor* fields[] = {&g.w_z, &g.u_z, &g.w_g, &g.u_g, &g.w_r, &g.u_r};
  return fields[i];
}

}  // namespace

GateParameters GateParameters::zeros(std::size_t d, double bias) {
  GateParameters g;
  for (int i = 0; i < 6; ++i) *field(g, i) = Tensor::zeros(d, d);
  g.b_g = Tensor({1, d}, bias);
  return g;
}

GateParameters GateParameters::random(std::size_t d, double bias, Rng& rng) {
  GateParameters g;
  for (int i = 0; i < 6; ++i) *field(g, i) = numerics::truncated_normal(d, d, d, rng);
  g.b_g = Tensor({1, d}, bias);
  return g;
}

GateParameters GateParameters::from(const ParameterSet& params, const std::string& prefix) {
  GateParameters g;
  for (int i = 0; i < 6; ++i) *field(g, i) = params.at(prefix + "/" + kNames[i]);
  g.b_g = params.at(prefix + "/b_g");
  return g;
}

void GateParameters::add_to(ParameterSet& params, const std::string& prefix) const {
  GateParameters copy = *this;
  for (int i = 0; i < 6; ++i) params.add(prefix + "/" + kNames[i], *field(copy, i));
  params.add(prefix + "/b_g", b_g);
}

Var gate(ParameterBinding& p, const std::string& prefix, Var y, Var x) {
  using namespace numerics;
  if (y.rows() != x.rows() || y.cols() != x.cols())
    throw ConfigError("gate: input shapes differ (" + std::to_string(y.cols()) + " vs " + std::to_string(x.cols()) + ")");
  auto lin = [&](Var a, const char* wa, Var b, const char* wb) {
    return add(matmul(a, p(prefix + "/" + wa)), matmul(b, p(prefix + "/" + wb)));
  };
  Var z = sigmoid(add_row(lin(x, "w_z", y, "u_z"), scale(p(prefix + "/b_g"), -1.0)));
  Var r = sigmoid(lin(x, "w_r", y, "u_r"));
  Var h = tanh(lin(x, "w_g", mul(r, y), "u_g"));
  Var keep = add_scalar(scale(z, -1.0), 1.0);
  return add(mul(keep, y), mul(z, h));
}

Tensor gru_gate(const Tensor& y, const Tensor& x, const GateParameters& params) {
  const std::size_t d = params.width();
  if (y.cols() != d || x.cols() != d || y.rows() != x.rows())
    throw ConfigError("gru_gate: widths must equal " + std::to_string(d));
  ParameterSet set;
  params.add_to(set, "g");
  numerics::Tape tape(false);
  ParameterBinding p(tape, set, false);
  const std::size_t n = y.rows();
  Var out = gate(p, "g", tape.constant(y.reshaped({n, d})), tape.constant(x.reshaped({n, d})));
  return out.value().reshaped(y.shape());
}

Tensor combine(const Tensor& y_seq, const Tensor& x_seq, const GateParameters& params) {
  if (y_seq.rows() != x_seq.rows())
    throw InputError("combine: sequence lengths differ (" + std::to_string(y_seq.rows()) + " vs " +
                     std::to_string(x_seq.rows()) + ")");
  return gru_gate(y_seq, x_seq, params);
}

}  // namespace coberl::core

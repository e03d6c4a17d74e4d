#include "coberl/model/core.hpp"

#include <vector>

#include "coberl/error.hpp"

namespace coberl::core {

using namespace numerics;

void add_lstm_parameters(ParameterSet& params, const std::string& prefix, std::size_t input, std::size_t hidden,
                         double forget_bias, Rng& rng) {
  params.add(prefix + "/wx", truncated_normal(input, 4 * hidden, input, rng));
  params.add(prefix + "/wh", truncated_normal(hidden, 4 * hidden, hidden, rng));
  Tensor b = Tensor::zeros(1, 4 * hidden);
  for (std::size_t k = 0; k < hidden; ++k) b(0, hidden + k) = forget_bias;
  params.add(prefix + "/b", std::move(b));
}

LstmResult lstm_unroll(ParameterBinding& p, const std::string& prefix, Var inputs, std::size_t batch, Var hidden,
                       Var cell) {
  const std::size_t H = hidden.cols();
  if (batch == 0 || inputs.rows() % batch != 0) throw InputError("lstm: rows not divisible by batch");
  if (hidden.rows() != batch || cell.rows() != batch || cell.cols() != H)
    throw ConfigError("lstm: state shape does not match batch " + std::to_string(batch));
  const std::size_t T = inputs.rows() / batch;
  Var wx = p(prefix + "/wx"), wh = p(prefix + "/wh"), b = p(prefix + "/b");
  if (wx.rows() != inputs.cols() || wh.rows() != H)
    throw ConfigError("lstm: width mismatch (input " + std::to_string(inputs.cols()) + ", hidden " +
                      std::to_string(H) + ")");

  // Input projection for all steps at once, then regroup rows time-major.
  Var projected = add_row(matmul(inputs, wx), b);
  std::vector<Var> outputs;
  outputs.reserve(T);
  std::vector<std::size_t> rows(batch);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t bi = 0; bi < batch; ++bi) rows[bi] = bi * T + t;
    Var gates = add(select_rows(projected, rows), matmul(hidden, wh));
    Var i = sigmoid(slice_cols(gates, 0, H));
    Var f = sigmoid(slice_cols(gates, H, H));
    Var g = tanh(slice_cols(gates, 2 * H, H));
    Var o = sigmoid(slice_cols(gates, 3 * H, H));
    cell = add(mul(f, cell), mul(i, g));
    hidden = mul(o, tanh(cell));
    outputs.push_back(hidden);
  }
  Var time_major = concat_rows(outputs);  // row t*B + b
  std::vector<std::size_t> order(batch * T);
  for (std::size_t bi = 0; bi < batch; ++bi)
    for (std::size_t t = 0; t < T; ++t) order[bi * T + t] = t * batch + bi;
  return {select_rows(time_major, order), hidden, cell};
}

void add_dueling_parameters(ParameterSet& params, const std::string& prefix, std::size_t input, std::size_t hidden,
                            std::size_t num_actions, Rng& rng) {
  params.add(prefix + "/hidden/w", truncated_normal(input, hidden, input, rng));
  params.add(prefix + "/hidden/b", Tensor::zeros(1, hidden));
  params.add(prefix + "/value/w", truncated_normal(hidden, 1, hidden, rng));
  params.add(prefix + "/value/b", Tensor::zeros(1, 1));
  params.add(prefix + "/advantage/w", truncated_normal(hidden, num_actions, hidden, rng));
  params.add(prefix + "/advantage/b", Tensor::zeros(1, num_actions));
}

Var dueling_combine(Var value, Var advantage) {
  Var centered = add_col(advantage, scale(mean_cols(advantage), -1.0));
  return add_col(centered, value);
}

Tensor dueling_combine(const Tensor& value, const Tensor& advantage) {
  if (value.rows() != advantage.rows() || value.cols() != 1) throw InputError("dueling: value/advantage shape mismatch");
  Tape tape(false);
  return dueling_combine(tape.constant(value), tape.constant(advantage.reshaped({advantage.rows(), advantage.cols()})))
      .value();
}

Var dueling_head(ParameterBinding& p, const std::string& prefix, Var features) {
  Var h = relu(add_row(matmul(features, p(prefix + "/hidden/w")), p(prefix + "/hidden/b")));
  Var v = add_row(matmul(h, p(prefix + "/value/w")), p(prefix + "/value/b"));
  Var a = add_row(matmul(h, p(prefix + "/advantage/w")), p(prefix + "/advantage/b"));
  return dueling_combine(v, a);
}

void add_head_parameters(ParameterSet& params, const CoreConfig& config, HeadShape shape, Rng& rng) {
  const bool gated = config.gate == GateMode::kGated;
  if (gated) GateParameters::zeros(shape.d_model, 2.0).add_to(params, "core/gate");
  add_lstm_parameters(params, "core/lstm", shape.d_model, config.lstm_size, config.forget_bias, rng);
  const std::size_t width = config.lstm_size + (gated ? shape.d_model : 0);
  add_dueling_parameters(params, "core/head", width, config.head_hidden, shape.num_actions, rng);
}

HeadResult run_head(ParameterBinding& p, const CoreConfig& config, Var y, Var x, std::size_t batch, Var hidden,
                    Var cell) {
  HeadResult r;
  if (config.gate == GateMode::kGated) {
    Var z = gate(p, "core/gate", y, x);
    LstmResult l = lstm_unroll(p, "core/lstm", z, batch, hidden, cell);
    const Var parts[] = {l.output, y};
    r.output = concat_cols(parts);
    r.hidden = l.hidden;
    r.cell = l.cell;
  } else {
    LstmResult l = lstm_unroll(p, "core/lstm", x, batch, hidden, cell);
    r.output = l.output;
    r.hidden = l.hidden;
    r.cell = l.cell;
  }
  r.q = dueling_head(p, "core/head", r.output);
  return r;
}

std::pair<Tensor, AgentState> unroll_head(const ParameterSet& params, const CoreConfig& config, const Tensor& z_seq,
                                          const Tensor& y_seq, const AgentState& state) {
  if (z_seq.rows() != y_seq.rows()) throw InputError("unroll_head: sequence lengths differ");
  if (state.lstm_hidden.size() != config.lstm_size || state.lstm_cell.size() != config.lstm_size)
    throw ConfigError("unroll_head: state width does not match lstm size " + std::to_string(config.lstm_size));
  Tape tape(false);
  ParameterBinding p(tape, params, false);
  LstmResult l = lstm_unroll(p, "core/lstm", tape.constant(z_seq), 1,
                             tape.constant(state.lstm_hidden.reshaped({1, config.lstm_size})),
                             tape.constant(state.lstm_cell.reshaped({1, config.lstm_size})));
  const Var parts[] = {l.output, tape.constant(y_seq)};
  AgentState next = state;
  next.lstm_hidden = l.hidden.value();
  next.lstm_cell = l.cell.value();
  return {concat_cols(parts).value(), std::move(next)};
}

Tensor dueling_q(const ParameterSet& params, const Tensor& output) {
  Tape tape(false);
  ParameterBinding p(tape, params, false);
  return dueling_head(p, "core/head", tape.constant(output.reshaped({output.size() / output.cols(), output.cols()})))
      .value();
}

}  // namespace coberl::core

#pragma once

#include <string>
#include <utility>

#include "coberl/config.hpp"
#include "coberl/model/gate.hpp"
#include "coberl/model/gtrxl.hpp"

namespace coberl::core {

/// Recurrent state of one stream: LSTM hidden/cell ([1, d_lstm]) plus XL memory.
struct AgentState {
  Tensor lstm_hidden;
  Tensor lstm_cell;
  gtrxl::TransformerMemory memory;
  friend bool operator==(const AgentState&, const AgentState&) = default;
};

/// LSTM without peepholes. Weights: x:[in, 4h], h:[h, 4h], b:[1, 4h]; gate order i, f, g, o.
void add_lstm_parameters(ParameterSet& params, const std::string& prefix, std::size_t input, std::size_t hidden,
                         double forget_bias, Rng& rng);

struct LstmResult {
  Var output;  // [B*T, h], sequence-major rows
  Var hidden;  // [B, h]
  Var cell;    // [B, h]
};
LstmResult lstm_unroll(ParameterBinding& p, const std::string& prefix, Var inputs, std::size_t batch, Var hidden,
                       Var cell);

/// Linear + ReLU, then value and advantage streams; Q = V + A - mean(A).
void add_dueling_parameters(ParameterSet& params, const std::string& prefix, std::size_t input, std::size_t hidden,
                            std::size_t num_actions, Rng& rng);
Var dueling_head(ParameterBinding& p, const std::string& prefix, Var features);
Var dueling_combine(Var value, Var advantage);
/// Value form of the dueling combination: value [N,1], advantage [N,A].
Tensor dueling_combine(const Tensor& value, const Tensor& advantage);

/// Head parameters: "core/gate/*", "core/lstm/*", "core/head/*".
struct HeadShape {
  std::size_t d_model;
  std::size_t num_actions;
};
void add_head_parameters(ParameterSet& params, const CoreConfig& config, HeadShape shape, Rng& rng);

struct HeadResult {
  Var output;  // [B*T, d_lstm + d_model] (or [B*T, d_lstm] without the gate)
  Var q;       // [B*T, A]
  Var hidden;
  Var cell;
};
/// Gate (unless disabled) of y with x, LSTM over the result, skip concatenation and dueling Q.
HeadResult run_head(ParameterBinding& p, const CoreConfig& config, Var y, Var x, std::size_t batch, Var hidden,
                    Var cell);

/// Single-sequence value form: LSTM over z then [lstm_out || y]. Returns the outputs and the advanced state.
std::pair<Tensor, AgentState> unroll_head(const ParameterSet& params, const CoreConfig& config, const Tensor& z_seq,
                                          const Tensor& y_seq, const AgentState& state);

/// Single-row value form of the dueling head over "core/head/*".
Tensor dueling_q(const ParameterSet& params, const Tensor& output);

}  // namespace coberl::core

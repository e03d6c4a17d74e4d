#pragma once

#include <span>
#include <vector>

#include "coberl/config.hpp"
#include "coberl/model/core.hpp"
#include "coberl/model/encoder.hpp"
#include "coberl/model/gtrxl.hpp"

namespace coberl::model {

using core::AgentState;
using numerics::ParameterBinding;
using numerics::ParameterSet;
using numerics::Rng;
using numerics::Tensor;
using numerics::Var;

/// Inputs for N steps: observation rows plus the previous action and reward.
struct StepBatch {
  Tensor observations;  // [N, obs_size]
  std::vector<std::size_t> prev_actions;
  std::vector<double> prev_rewards;
};

/// Recurrent state of B streams in batch layout.
struct BatchState {
  std::vector<Tensor> memory;  // per layer [B*M, d]
  Tensor hidden;               // [B, d_lstm]
  Tensor cell;
};

/// Encoder -> GTrXL -> gate -> LSTM -> dueling head.
class CoberlNetwork {
 public:
  CoberlNetwork(const Config& config, encoder::ObservationShape obs_shape, std::size_t num_actions);

  const Config& config() const { return config_; }
  const encoder::Encoder& encoder() const { return encoder_; }
  const gtrxl::GatedTransformerXL& transformer() const { return transformer_; }
  std::size_t num_actions() const { return num_actions_; }
  std::size_t observation_size() const { return encoder_.observation_shape().size(); }

  ParameterSet init_parameters(Rng& rng) const;
  AgentState initial_state() const;

  BatchState stack(std::span<const AgentState* const> states) const;
  AgentState unstack(const BatchState& state, std::size_t index) const;

  /// Y: [N, d_model].
  Var embed(ParameterBinding& p, const StepBatch& steps) const;

  struct Unroll {
    Var q;            // [B*T, A]
    Var transformer;  // [B*T, d_model]
    std::vector<Tensor> memory;
    Var hidden;
    Var cell;
  };
  /// `y` feeds the gate and skip path, `transformer_in` the transformer.
  Unroll unroll(ParameterBinding& p, Var y, Var transformer_in, std::size_t batch, const BatchState& state,
                bool causal) const;

  struct ActOutput {
    Tensor q;  // [B, A]
    std::vector<AgentState> states;
  };
  /// One causal, unmasked step for each of B streams. Throws HarnessError if the mask token is read.
  ActOutput act(const ParameterSet& params, const StepBatch& steps, std::span<const AgentState> states) const;

 private:
  Config config_;
  encoder::Encoder encoder_;
  gtrxl::GatedTransformerXL transformer_;
  std::size_t num_actions_;
};

}  // namespace coberl::model

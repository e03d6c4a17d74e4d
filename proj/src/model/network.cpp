#include "coberl/model/network.hpp"

#include "coberl/contrastive/contrastive.hpp"
#include "coberl/error.hpp"

namespace coberl::model {

CoberlNetwork::CoberlNetwork(const Config& config, encoder::ObservationShape obs_shape, std::size_t num_actions)
    : config_(config),
      encoder_(config.encoder, obs_shape, num_actions, config.transformer.d_model),
      transformer_(config.transformer),
      num_actions_(num_actions) {}

ParameterSet CoberlNetwork::init_parameters(Rng& rng) const {
  ParameterSet params;
  encoder_.init_parameters(params, rng);
  transformer_.init_parameters(params, rng);
  core::add_head_parameters(params, config_.core, {config_.transformer.d_model, num_actions_}, rng);
  contrastive::add_parameters(params, config_.contrastive, config_.transformer.d_model, rng);
  return params;
}

AgentState CoberlNetwork::initial_state() const {
  return {Tensor::zeros(1, config_.core.lstm_size), Tensor::zeros(1, config_.core.lstm_size),
          gtrxl::reset_memory(config_.transformer)};
}

BatchState CoberlNetwork::stack(std::span<const AgentState* const> states) const {
  const std::size_t B = states.size(), H = config_.core.lstm_size;
  BatchState s;
  s.hidden = Tensor::zeros(B, H);
  s.cell = Tensor::zeros(B, H);
  std::vector<const gtrxl::TransformerMemory*> mems;
  for (std::size_t b = 0; b < B; ++b) {
    const AgentState& a = *states[b];
    if (a.lstm_hidden.size() != H || a.lstm_cell.size() != H)
      throw ConfigError("agent state: LSTM width " + std::to_string(a.lstm_hidden.size()) + " != " + std::to_string(H));
    std::copy(a.lstm_hidden.data(), a.lstm_hidden.data() + H, s.hidden.data() + b * H);
    std::copy(a.lstm_cell.data(), a.lstm_cell.data() + H, s.cell.data() + b * H);
    mems.push_back(&a.memory);
  }
  s.memory = transformer_.stack_memory(mems);
  return s;
}

AgentState CoberlNetwork::unstack(const BatchState& state, std::size_t index) const {
  const std::size_t H = config_.core.lstm_size;
  AgentState a;
  a.lstm_hidden = Tensor::zeros(1, H);
  a.lstm_cell = Tensor::zeros(1, H);
  std::copy(state.hidden.data() + index * H, state.hidden.data() + (index + 1) * H, a.lstm_hidden.data());
  std::copy(state.cell.data() + index * H, state.cell.data() + (index + 1) * H, a.lstm_cell.data());
  a.memory = transformer_.unstack_memory(state.memory, index);
  return a;
}

Var CoberlNetwork::embed(ParameterBinding& p, const StepBatch& steps) const {
  return encoder_.build_input_embedding(p, steps.observations, steps.prev_actions, steps.prev_rewards);
}

CoberlNetwork::Unroll CoberlNetwork::unroll(ParameterBinding& p, Var y, Var transformer_in, std::size_t batch,
                                            const BatchState& state, bool causal) const {
  numerics::Tape& tape = p.tape();
  auto t = transformer_.forward(p, transformer_in, batch, state.memory, causal);
  auto head = core::run_head(p, config_.core, y, t.output, batch, tape.constant(state.hidden),
                             tape.constant(state.cell));
  return {head.q, t.output, std::move(t.memory), head.hidden, head.cell};
}

CoberlNetwork::ActOutput CoberlNetwork::act(const ParameterSet& params, const StepBatch& steps,
                                            std::span<const AgentState> states) const {
  const std::size_t B = states.size();
  if (steps.observations.rows() != B) throw InputError("act: one observation per state expected");
  numerics::Tape tape(false);
  ParameterBinding p(tape, params, false);
  std::vector<const AgentState*> ptrs;
  for (const auto& s : states) ptrs.push_back(&s);
  const BatchState stacked = stack(ptrs);
  Var y = embed(p, steps);
  Unroll u = unroll(p, y, y, B, stacked, true);
  if (p.accessed("contrastive/mask_token")) throw HarnessError("acting path consulted the mask token");
  ActOutput out;
  out.q = u.q.value();
  const BatchState next{u.memory, u.hidden.value(), u.cell.value()};
  for (std::size_t b = 0; b < B; ++b) out.states.push_back(unstack(next, b));
  return out;
}

}  // namespace coberl::model

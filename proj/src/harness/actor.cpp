#include "coberl/harness/actor.hpp"

#include <cmath>

#include "coberl/error.hpp"

namespace coberl::harness {

double epsilon_for_actor(std::size_t index, std::size_t num_actors, double base_epsilon, double alpha) {
  if (num_actors == 0 || index >= num_actors) throw ConfigError("epsilon_for_actor: index out of range");
  if (num_actors == 1) return base_epsilon;
  const double exponent = 1.0 + alpha * static_cast<double>(index) / static_cast<double>(num_actors - 1);
  return std::pow(base_epsilon, exponent);
}

std::size_t actor_step(std::span<const double> q_values, double epsilon, Rng& rng) {
  if (q_values.empty()) throw InputError("actor_step: no actions");
  for (double q : q_values)
    if (!std::isfinite(q)) throw NumericError("actor_step: non-finite Q-value");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (epsilon > 0.0 && unit(rng) < epsilon)
    return std::uniform_int_distribution<std::size_t>(0, q_values.size() - 1)(rng);
  std::size_t best = 0;
  for (std::size_t a = 1; a < q_values.size(); ++a)
    if (q_values[a] > q_values[best]) best = a;
  return best;
}

std::vector<InferenceResponse> InferenceService::infer(const numerics::ParameterSet& params,
                                                       const std::vector<InferenceRequest>& requests) const {
  const std::size_t B = requests.size();
  std::vector<InferenceResponse> out;
  if (B == 0) return out;
  const std::size_t obs = net_->observation_size();
  model::StepBatch steps;
  steps.observations = Tensor::zeros(B, obs);
  std::vector<core::AgentState> states;
  states.reserve(B);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& r = requests[b];
    if (r.observation.size() != obs) throw InputError("inference: observation size mismatch");
    std::copy(r.observation.data(), r.observation.data() + obs, steps.observations.data() + b * obs);
    steps.prev_actions.push_back(r.prev_action);
    steps.prev_rewards.push_back(r.prev_reward);
    states.push_back(r.state);
  }
  auto act = net_->act(params, steps, states);
  ++batches_;
  const std::size_t A = net_->num_actions();
  for (std::size_t b = 0; b < B; ++b) {
    Tensor q({A});
    std::copy(act.q.data() + b * A, act.q.data() + (b + 1) * A, q.data());
    out.push_back({std::move(q), std::move(act.states[b])});
  }
  return out;
}

Actor::Actor(std::size_t id, double epsilon, std::unique_ptr<envs::Environment> env, const model::CoberlNetwork& net,
             std::uint64_t seed)
    : id_(id),
      epsilon_(epsilon),
      env_(std::move(env)),
      net_(&net),
      rng_(seed),
      trace_(net.config().replay.trace_length),
      period_(net.config().replay.replay_period) {
  begin_episode();
}

void Actor::begin_episode() {
  const Tensor obs = env_->reset();
  request_.observation = obs.reshaped({obs.size()});
  request_.prev_action = 0;
  request_.prev_reward = 0.0;
  request_.state = net_->initial_state();
  episode_.clear();
  next_start_ = 0;
  episode_return_ = 0.0;
}

void Actor::advance(const InferenceResponse& response) {
  const std::size_t action = actor_step(response.q.values(), epsilon_, rng_);
  envs::EnvStep step = env_->step(action);
  ++env_steps_;
  episode_return_ += step.reward;
  episode_.push_back({request_.observation, request_.prev_action, request_.prev_reward, request_.state, response.q,
                      action, step.reward, step.terminal});
  request_.observation = step.observation.reshaped({step.observation.size()});
  request_.prev_action = action;
  request_.prev_reward = step.reward;
  request_.state = response.state;

  const std::size_t n = episode_.size();
  if (step.terminal) {
    for (; next_start_ < n; next_start_ += period_) emit(next_start_, true);
    returns_.push_back(episode_return_);
    ++episode_id_;
    begin_episode();
    return;
  }
  for (; next_start_ + trace_ <= n; next_start_ += period_) emit(next_start_, false);
}

void Actor::emit(std::size_t start, bool final) {
  const std::size_t L = trace_, obs = net_->observation_size(), A = net_->num_actions();
  replay::TransitionSequence s;
  s.observations = Tensor::zeros(L + 1, obs);
  s.prev_actions.assign(L + 1, 0);
  s.prev_rewards.assign(L + 1, 0.0);
  s.actions.assign(L, 0);
  s.rewards.assign(L, 0.0);
  s.terminal.assign(L, 0);
  s.valid.assign(L, 0);
  s.behaviour_q = Tensor::zeros(L, A);
  s.initial_state = episode_[start].state;
  s.episode_id = episode_id_;
  s.actor_id = id_;
  s.start_step = start;
  const std::size_t n = episode_.size();
  std::size_t k = 0;
  for (; k < L && start + k < n; ++k) {
    const Record& r = episode_[start + k];
    std::copy(r.observation.data(), r.observation.data() + obs, s.observations.data() + k * obs);
    s.prev_actions[k] = r.prev_action;
    s.prev_rewards[k] = r.prev_reward;
    s.actions[k] = r.action;
    s.rewards[k] = r.reward;
    s.terminal[k] = r.terminal;
    s.valid[k] = 1;
    std::copy(r.q.data(), r.q.data() + A, s.behaviour_q.data() + k * A);
  }
  // Bootstrap input after the last stored step.
  if (!(final && start + k >= n && episode_[n - 1].terminal)) {
    std::copy(request_.observation.data(), request_.observation.data() + obs, s.observations.data() + k * obs);
    s.prev_actions[k] = request_.prev_action;
    s.prev_rewards[k] = request_.prev_reward;
  } else {
    const Record& last = episode_[n - 1];
    s.prev_actions[k] = last.action;
    s.prev_rewards[k] = last.reward;
  }
  ready_.push_back(std::move(s));
}

std::vector<replay::TransitionSequence> Actor::take_sequences() { return std::exchange(ready_, {}); }

std::vector<double> Actor::take_returns() { return std::exchange(returns_, {}); }

}  // namespace coberl::harness

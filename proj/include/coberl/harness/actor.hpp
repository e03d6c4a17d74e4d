#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "coberl/envs/envs.hpp"
#include "coberl/model/network.hpp"
#include "coberl/replay/replay.hpp"

namespace coberl::harness {

using numerics::Rng;
using numerics::Tensor;

/// eps^(1 + alpha * l / (L - 1)); a single actor uses exponent 1.
double epsilon_for_actor(std::size_t index, std::size_t num_actors, double base_epsilon = 0.4, double alpha = 7.0);

/// Epsilon-greedy over one row of Q-values; ties go to the lowest index.
std::size_t actor_step(std::span<const double> q_values, double epsilon, Rng& rng);

/// What an actor sends to inference: (x_t, a_{t-1}, r_{t-1}, h_{t-1}).
struct InferenceRequest {
  Tensor observation;  // flattened [obs_size]
  std::size_t prev_action = 0;
  double prev_reward = 0.0;
  core::AgentState state;
};

struct InferenceResponse {
  Tensor q;  // [A]
  core::AgentState state;
};

/// Batched forward passes against the latest published snapshot.
class InferenceService {
 public:
  explicit InferenceService(const model::CoberlNetwork& net) : net_(&net) {}
  std::vector<InferenceResponse> infer(const numerics::ParameterSet& params,
                                       const std::vector<InferenceRequest>& requests) const;
  std::uint64_t batches() const { return batches_; }

 private:
  const model::CoberlNetwork* net_;
  mutable std::uint64_t batches_ = 0;
};

/// Acts in one environment and cuts its episodes into overlapping traces.
class Actor {
 public:
  Actor(std::size_t id, double epsilon, std::unique_ptr<envs::Environment> env, const model::CoberlNetwork& net,
        std::uint64_t seed);

  std::size_t id() const { return id_; }
  double epsilon() const { return epsilon_; }
  const InferenceRequest& request() const { return request_; }

  /// Picks an action from the response, steps the environment and records the transition.
  void advance(const InferenceResponse& response);

  /// Sequences completed since the last call.
  std::vector<replay::TransitionSequence> take_sequences();
  /// Returns of episodes completed since the last call.
  std::vector<double> take_returns();
  std::uint64_t env_steps() const { return env_steps_; }

 private:
  struct Record {
    Tensor observation;
    std::size_t prev_action;
    double prev_reward;
    core::AgentState state;
    Tensor q;
    std::size_t action;
    double reward;
    bool terminal;
  };

  void begin_episode();
  void emit(std::size_t start, bool final);

  std::size_t id_;
  double epsilon_;
  std::unique_ptr<envs::Environment> env_;
  const model::CoberlNetwork* net_;
  Rng rng_;
  std::size_t trace_;
  std::size_t period_;

  InferenceRequest request_;
  std::vector<Record> episode_;
  std::size_t next_start_ = 0;
  std::uint64_t episode_id_ = 0;
  double episode_return_ = 0.0;
  std::uint64_t env_steps_ = 0;
  std::vector<replay::TransitionSequence> ready_;
  std::vector<double> returns_;
};

}  // namespace coberl::harness

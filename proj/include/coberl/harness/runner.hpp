#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "coberl/config.hpp"
#include "coberl/envs/envs.hpp"
#include "coberl/harness/actor.hpp"
#include "coberl/harness/learner.hpp"
#include "coberl/metrics/metrics.hpp"

namespace coberl::harness {

struct EvalReport {
  std::uint64_t step = 0;
  double mean_return = 0.0;
  std::vector<double> returns;
};

/// Plays `episodes` episodes with an epsilon-greedy policy, resetting the agent
/// state at every episode start, and returns their returns.
std::vector<double> run_episodes(const model::CoberlNetwork& net, const numerics::ParameterSet& params,
                                 envs::Environment& env, std::size_t episodes, double epsilon, Rng& rng);

EvalReport evaluate(const model::CoberlNetwork& net, const numerics::ParameterSet& params, envs::Environment& env,
                    std::size_t episodes, double epsilon, Rng& rng, std::uint64_t step = 0);

/// Mean of reports whose step lies in [0.95 * budget, budget].
double final_window_summary(const std::vector<EvalReport>& reports, double budget);

/// Observation shape and action count of the configured environment.
std::unique_ptr<model::CoberlNetwork> make_network(const Config& config);

struct RunResult {
  std::vector<metrics::MetricsRow> rows;
  std::vector<EvalReport> evals;
  double summary = 0.0;
  std::uint64_t env_steps = 0;
  std::uint64_t learner_steps = 0;
  std::uint64_t sequences_inserted = 0;
  std::uint64_t inference_batches = 0;
  numerics::ParameterSet final_params;
};

using RowCallback = std::function<void(const metrics::MetricsRow&)>;

/// Trains for config.run.total_env_steps. Single-threaded mode interleaves
/// actors and learner round-robin and is fully deterministic for a seed.
RunResult run_training(const Config& config, const RowCallback& on_row = {});

}  // namespace coberl::harness

#include "coberl/harness/runner.hpp"

#include <atomic>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <limits>
#include <mutex>
#include <optional>
#include <random>
#include <thread>

#include "coberl/error.hpp"

namespace coberl::harness {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Independent streams derived from the run seed.
struct Seeds {
  explicit Seeds(std::uint64_t seed) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x5eedu};
    base = std::mt19937_64(seq)();
  }
  std::uint64_t stream(std::uint64_t tag, std::uint64_t index = 0) const {
    std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                      static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(index)};
    return std::mt19937_64(seq)();
  }
  std::uint64_t base;
};

enum Stream : std::uint64_t { kInit = 1, kActorEnv, kActorRng, kReplay, kLearner, kEvalEnv, kEvalRng };

double mean_or_nan(const std::vector<double>& v) {
  if (v.empty()) return kNaN;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Accumulates per-row statistics between evaluation reports.
struct RowStats {
  std::vector<double> returns, loss_rl, loss_aux, priorities;
  void add(const LearnerReport& r) {
    if (!r.applied) return;
    loss_rl.push_back(r.loss_rl);
    loss_aux.push_back(r.loss_contrastive);
    for (double p : r.priorities) priorities.push_back(p);
  }
  metrics::MetricsRow take(double step, double eval_return, double epsilon_mean) {
    metrics::MetricsRow row{step, mean_or_nan(returns), eval_return, mean_or_nan(loss_rl), mean_or_nan(loss_aux),
                            mean_or_nan(priorities), epsilon_mean};
    *this = {};
    return row;
  }
};

replay::SequenceShape sequence_shape(const model::CoberlNetwork& net) {
  const Config& c = net.config();
  return {c.replay.trace_length,  net.observation_size(),   net.num_actions(), c.core.lstm_size,
          c.transformer.num_layers, c.transformer.memory_size, c.transformer.d_model};
}

}  // namespace

std::vector<double> run_episodes(const model::CoberlNetwork& net, const numerics::ParameterSet& params,
                                 envs::Environment& env, std::size_t episodes, double epsilon, Rng& rng) {
  std::vector<double> returns;
  for (std::size_t e = 0; e < episodes; ++e) {
    Tensor obs = env.reset();
    core::AgentState state = net.initial_state();
    std::size_t prev_action = 0;
    double prev_reward = 0.0, total = 0.0;
    for (std::size_t t = 0;; ++t) {
      if (t > env.horizon()) throw HarnessError("evaluation episode exceeded the environment horizon");
      model::StepBatch step{obs.reshaped({1, obs.size()}), {prev_action}, {prev_reward}};
      auto out = net.act(params, step, std::span(&state, 1));
      const std::size_t a = actor_step(out.q.values(), epsilon, rng);
      envs::EnvStep s = env.step(a);
      total += s.reward;
      if (s.terminal) break;
      state = std::move(out.states[0]);
      obs = std::move(s.observation);
      prev_action = a;
      prev_reward = s.reward;
    }
    returns.push_back(total);
  }
  return returns;
}

EvalReport evaluate(const model::CoberlNetwork& net, const numerics::ParameterSet& params, envs::Environment& env,
                    std::size_t episodes, double epsilon, Rng& rng, std::uint64_t step) {
  EvalReport r;
  r.step = step;
  r.returns = run_episodes(net, params, env, episodes, epsilon, rng);
  r.mean_return = mean_or_nan(r.returns);
  return r;
}

double final_window_summary(const std::vector<EvalReport>& reports, double budget) {
  metrics::LearningCurve c;
  for (const auto& r : reports) {
    c.steps.push_back(static_cast<double>(r.step));
    c.values.push_back(r.mean_return);
  }
  return metrics::final_window_mean(c, budget);
}

std::unique_ptr<model::CoberlNetwork> make_network(const Config& config) {
  auto probe = envs::make_environment(config.env, 0);
  return std::make_unique<model::CoberlNetwork>(config, probe->observation_shape(), probe->num_actions());
}

namespace {

class Run {
 public:
  Run(const Config& config, const RowCallback& on_row)
      : config_(config),
        seeds_(config.run.seed),
        net_(make_network(config)),
        learner_(*net_, init_params(), seeds_.stream(kLearner)),
        replay_(config.replay.capacity, config.replay.min_sequences, config.replay.sampling_exponent,
                sequence_shape(*net_)),
        inference_(*net_),
        replay_rng_(seeds_.stream(kReplay)),
        eval_env_(envs::make_environment(config.env, seeds_.stream(kEvalEnv))),
        eval_rng_(seeds_.stream(kEvalRng)),
        on_row_(on_row) {
    for (std::size_t i = 0; i < config.actors.num_actors; ++i) {
      const double eps = epsilon_for_actor(i, config.actors.num_actors, config.actors.base_epsilon, config.actors.alpha);
      epsilon_mean_ += eps / static_cast<double>(config.actors.num_actors);
      actors_.push_back(std::make_unique<Actor>(i, eps, envs::make_environment(config.env, seeds_.stream(kActorEnv, i)),
                                                *net_, seeds_.stream(kActorRng, i)));
    }
  }

  RunResult single_threaded() {
    const std::uint64_t total = config_.run.total_env_steps;
    report(0);
    std::uint64_t steps = 0, next_update = config_.learner.env_steps_per_update;
    std::uint64_t next_eval = config_.evaluator.interval;
    std::vector<InferenceRequest> requests;
    while (steps < total) {
      requests.clear();
      for (const auto& a : actors_) requests.push_back(a->request());
      const auto snapshot = learner_.snapshot();
      const auto responses = inference_.infer(*snapshot, requests);
      for (std::size_t i = 0; i < actors_.size(); ++i) {
        actors_[i]->advance(responses[i]);
        collect(*actors_[i]);
      }
      steps += actors_.size();
      while (steps >= next_update) {
        next_update += config_.learner.env_steps_per_update;
        learn();
      }
      if (steps >= next_eval || steps >= total) {
        report(steps);
        while (next_eval <= steps) next_eval += config_.evaluator.interval;
      }
    }
    return finish(steps);
  }

  RunResult threaded() {
    const std::uint64_t total = config_.run.total_env_steps;
    report(0);
    std::atomic<std::uint64_t> steps{0};
    std::atomic<bool> stop{false};
    std::mutex mu;
    std::condition_variable cv;
    struct Pending {
      std::size_t actor;
      InferenceRequest request;
      std::optional<InferenceResponse> response;
    };
    std::deque<Pending*> queue;
    std::exception_ptr failure;
    std::mutex failure_mu;
    auto fail = [&](std::exception_ptr e) {
      std::lock_guard lock(failure_mu);
      if (!failure) failure = e;
      stop = true;
      cv.notify_all();
    };
    std::mutex actor_mu;  // guards replay inserts of returns/stats

    std::vector<std::thread> threads;
    for (std::size_t i = 0; i < actors_.size(); ++i) {
      threads.emplace_back([&, i] {
        try {
          Actor& actor = *actors_[i];
          while (!stop && steps.load() < total) {
            Pending p{i, actor.request(), std::nullopt};
            {
              std::unique_lock lock(mu);
              queue.push_back(&p);
              cv.notify_all();
              cv.wait(lock, [&] { return p.response.has_value() || stop.load(); });
              if (!p.response) return;
            }
            actor.advance(*p.response);
            steps.fetch_add(1);
            std::lock_guard lock(actor_mu);
            collect(actor);
          }
        } catch (...) {
          fail(std::current_exception());
        }
      });
    }
    // Inference service: waits for a batch of requests, serves them with the latest snapshot.
    threads.emplace_back([&] {
      try {
        const std::size_t want = std::min(config_.run.inference_batch, actors_.size());
        while (true) {
          std::vector<Pending*> batch;
          {
            std::unique_lock lock(mu);
            cv.wait_for(lock, std::chrono::milliseconds(5),
                        [&] { return queue.size() >= want || stop.load() || steps.load() >= total; });
            if (stop || steps.load() >= total) {
              stop = true;
              cv.notify_all();
              return;
            }
            if (queue.empty()) continue;
            batch.assign(queue.begin(), queue.end());
            queue.clear();
          }
          std::vector<InferenceRequest> reqs;
          for (auto* p : batch) reqs.push_back(p->request);
          auto responses = inference_.infer(*learner_.snapshot(), reqs);
          std::lock_guard lock(mu);
          for (std::size_t k = 0; k < batch.size(); ++k) batch[k]->response = std::move(responses[k]);
          cv.notify_all();
        }
      } catch (...) {
        fail(std::current_exception());
      }
    });

    // Learner and evaluator on this thread.
    std::uint64_t next_eval = config_.evaluator.interval;
    try {
      while (!stop) {
        const std::uint64_t now = steps.load();
        if ((learner_.steps() + 1) * config_.learner.env_steps_per_update <= now) {
          learn_locked(actor_mu);
        } else {
          std::this_thread::sleep_for(std::chrono::microseconds(200));
        }
        if (now >= next_eval && now < total) {
          std::lock_guard lock(actor_mu);
          report(now);
          while (next_eval <= now) next_eval += config_.evaluator.interval;
        }
        if (now >= total) break;
      }
    } catch (...) {
      fail(std::current_exception());
    }
    stop = true;
    cv.notify_all();
    for (auto& t : threads) t.join();
    if (failure) std::rethrow_exception(failure);
    return finish(steps.load());
  }

 private:
  ParameterSet init_params() {
    Rng rng(seeds_.stream(kInit));
    return net_->init_parameters(rng);
  }

  void collect(Actor& actor) {
    for (auto& s : actor.take_sequences()) {
      replay_.insert(std::move(s));
      ++sequences_;
    }
    for (double r : actor.take_returns()) stats_.returns.push_back(r);
  }

  void learn() {
    auto samples = replay_.sample(config_.replay.batch_size, config_.replay.importance_exponent, replay_rng_);
    if (!samples) return;
    const LearnerReport r = learner_.step(make_batch(*samples));
    if (r.applied) {
      std::vector<std::uint64_t> refs;
      for (const auto& s : *samples) refs.push_back(s.ref);
      replay_.update_priorities(refs, r.priorities);
    }
    stats_.add(r);
  }

  void learn_locked(std::mutex& mu) {
    auto samples = replay_.sample(config_.replay.batch_size, config_.replay.importance_exponent, replay_rng_);
    if (!samples) {
      std::this_thread::sleep_for(std::chrono::microseconds(200));
      return;
    }
    const LearnerReport r = learner_.step(make_batch(*samples));
    if (r.applied) {
      std::vector<std::uint64_t> refs;
      for (const auto& s : *samples) refs.push_back(s.ref);
      replay_.update_priorities(refs, r.priorities);
    }
    std::lock_guard lock(mu);
    stats_.add(r);
  }

  void report(std::uint64_t step) {
    const auto snapshot = learner_.snapshot();
    EvalReport e = evaluate(*net_, *snapshot, *eval_env_, config_.evaluator.episodes, config_.evaluator.epsilon,
                            eval_rng_, step);
    const metrics::MetricsRow row = stats_.take(static_cast<double>(step), e.mean_return, epsilon_mean_);
    evals_.push_back(std::move(e));
    rows_.push_back(row);
    if (on_row_) on_row_(row);
  }

  RunResult finish(std::uint64_t steps) {
    if (evals_.empty() || evals_.back().step != steps) report(steps);
    RunResult r;
    r.rows = rows_;
    r.evals = evals_;
    r.env_steps = steps;
    r.summary = final_window_summary(evals_, static_cast<double>(steps));
    r.learner_steps = learner_.steps();
    r.sequences_inserted = sequences_;
    r.inference_batches = inference_.batches();
    r.final_params = learner_.online();
    return r;
  }

  Config config_;
  Seeds seeds_;
  std::unique_ptr<model::CoberlNetwork> net_;
  Learner learner_;
  replay::PrioritizedReplay replay_;
  InferenceService inference_;
  Rng replay_rng_;
  std::unique_ptr<envs::Environment> eval_env_;
  Rng eval_rng_;
  RowCallback on_row_;
  std::vector<std::unique_ptr<Actor>> actors_;
  double epsilon_mean_ = 0.0;
  RowStats stats_;
  std::vector<metrics::MetricsRow> rows_;
  std::vector<EvalReport> evals_;
  std::uint64_t sequences_ = 0;
};

}  // namespace

RunResult run_training(const Config& config, const RowCallback& on_row) {
  config.validate();
  Run run(config, on_row);
  return config.run.mode == RunMode::kThreaded ? run.threaded() : run.single_threaded();
}

}  // namespace coberl::harness

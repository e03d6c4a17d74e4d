#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "coberl/error.hpp"
#include "coberl/harness/actor.hpp"
#include "coberl/harness/learner.hpp"
#include "coberl/harness/runner.hpp"
#include "test_support.hpp"

namespace coberl {
namespace {

using namespace harness;
using numerics::ParameterSet;
using numerics::Tensor;

Config tiny_config() {
  Config c;
  c.encoder.preset = EncoderPreset::kFlat;
  apply_encoder_preset(c.encoder);
  c.encoder.action_reward_size = 4;
  c.transformer.num_layers = 1;
  c.transformer.d_model = 16;
  c.transformer.num_heads = 2;
  c.transformer.head_size = 8;
  c.transformer.mlp_size = 16;
  c.transformer.memory_size = 4;
  c.core.lstm_size = 8;
  c.core.head_hidden = 8;
  c.contrastive.critic_size = 8;
  c.contrastive.mask_rate = 0.3;
  c.replay.trace_length = 6;
  c.replay.replay_period = 3;
  c.replay.burn_in = 2;
  c.replay.capacity = 64;
  c.replay.min_sequences = 4;
  c.replay.batch_size = 3;
  c.actors.num_actors = 2;
  c.learner.env_steps_per_update = 8;
  c.evaluator.interval = 200;
  c.evaluator.episodes = 2;
  c.env.horizon = 5;
  c.env.num_cues = 3;
  c.run.total_env_steps = 600;
  c.run.seed = 11;
  c.validate();
  return c;
}

// Plays one actor until it has produced at least `count` sequences.
std::vector<replay::TransitionSequence> collect(const model::CoberlNetwork& net, const ParameterSet& params,
                                                std::size_t count, std::uint64_t seed, double epsilon = 0.5) {
  Actor actor(0, epsilon, envs::make_environment(net.config().env, seed), net, seed + 1);
  InferenceService svc(net);
  std::vector<replay::TransitionSequence> out;
  while (out.size() < count) {
    actor.advance(svc.infer(params, {actor.request()})[0]);
    for (auto& s : actor.take_sequences()) out.push_back(std::move(s));
  }
  return out;
}

TrainingBatch as_batch(const std::vector<replay::TransitionSequence>& seqs, std::size_t begin, std::size_t n) {
  TrainingBatch b;
  for (std::size_t i = 0; i < n; ++i) {
    b.sequences.push_back(std::make_shared<const replay::TransitionSequence>(seqs[(begin + i) % seqs.size()]));
    b.weights.push_back(1.0 - 0.1 * static_cast<double>(i));
  }
  return b;
}

bool bit_equal(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

// ---- epsilon schedule and action selection ------------------------------------------------

TEST(Epsilon, Endpoints) {
  EXPECT_EQ(epsilon_for_actor(0, 8), 0.4);
  EXPECT_NEAR(epsilon_for_actor(7, 8), 6.5536e-4, 1e-15);
  EXPECT_NEAR(epsilon_for_actor(255, 256), std::pow(0.4, 8.0), 1e-15);
  EXPECT_EQ(epsilon_for_actor(0, 1), 0.4);
}

TEST(Epsilon, StrictlyDecreasing) {
  for (std::size_t L : {2u, 3u, 8u, 33u})
    for (std::size_t l = 1; l < L; ++l) EXPECT_LT(epsilon_for_actor(l, L), epsilon_for_actor(l - 1, L));
}

TEST(Epsilon, IndexOutOfRangeIsConfigError) {
  EXPECT_THROW(epsilon_for_actor(4, 4), ConfigError);
  EXPECT_THROW(epsilon_for_actor(0, 0), ConfigError);
}

TEST(ActorStep, GreedyAndTies) {
  numerics::Rng rng(1);
  const std::vector<double> q{0.1, 2.0, -1.0};
  for (int i = 0; i < 100; ++i) EXPECT_EQ(actor_step(q, 0.0, rng), 1u);
  const std::vector<double> tie{1.0, 1.0, 0.0};
  EXPECT_EQ(actor_step(tie, 0.0, rng), 0u);
  const std::vector<double> bad{0.0, std::nan("")};
  EXPECT_THROW(actor_step(bad, 0.0, rng), NumericError);
}

TEST(ActorStep, FullEpsilonIsUniform) {
  numerics::Rng rng(2);
  const std::vector<double> q{5.0, 0.0, 0.0, 0.0};
  const std::size_t draws = 100000;
  std::vector<std::size_t> counts(4, 0);
  for (std::size_t i = 0; i < draws; ++i) ++counts[actor_step(q, 1.0, rng)];
  const double mean = draws / 4.0, sigma = std::sqrt(draws * 0.25 * 0.75);
  for (std::size_t c : counts) EXPECT_LE(std::abs(static_cast<double>(c) - mean), 3 * sigma);
}

TEST(ActorStep, RateOfExplorationMatchesEpsilon) {
  numerics::Rng rng(3);
  const std::vector<double> q{0.0, 1.0};
  const double eps = 0.3;
  const std::size_t draws = 100000;
  std::size_t greedy = 0;
  for (std::size_t i = 0; i < draws; ++i) greedy += actor_step(q, eps, rng) == 1;
  const double p = 1 - eps / 2, sigma = std::sqrt(draws * p * (1 - p));
  EXPECT_LE(std::abs(greedy - draws * p), 3 * sigma);
}

// ---- actors and inference -----------------------------------------------------------

class HarnessFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    config = tiny_config();
    net = make_network(config);
    numerics::Rng rng(5);
    params = net->init_parameters(rng);
  }
  Config config;
  std::unique_ptr<model::CoberlNetwork> net;
  ParameterSet params;
};

TEST_F(HarnessFixture, IdenticalRequestsGiveIdenticalQ) {
  Actor actor(0, 0.0, envs::make_environment(config.env, 9), *net, 1);
  InferenceService svc(*net);
  const std::vector<InferenceRequest> reqs(3, actor.request());
  const auto out = svc.infer(params, reqs);
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out[0].q, out[1].q);
  EXPECT_EQ(out[1].q, out[2].q);
  EXPECT_EQ(out[0].state, out[2].state);
  EXPECT_EQ(svc.batches(), 1u);
}

TEST_F(HarnessFixture, BatchedInferenceMatchesSingleRequests) {
  auto a = collect(*net, params, 1, 20);
  Actor x(0, 0.5, envs::make_environment(config.env, 30), *net, 31);
  Actor y(1, 0.5, envs::make_environment(config.env, 40), *net, 41);
  InferenceService svc(*net);
  for (int t = 0; t < 7; ++t) {
    const auto both = svc.infer(params, {x.request(), y.request()});
    const auto only_x = svc.infer(params, {x.request()});
    const auto only_y = svc.infer(params, {y.request()});
    for (std::size_t k = 0; k < both[0].q.size(); ++k) {
      EXPECT_NEAR(both[0].q[k], only_x[0].q[k], 1e-12);
      EXPECT_NEAR(both[1].q[k], only_y[0].q[k], 1e-12);
    }
    x.advance(both[0]);
    y.advance(both[1]);
  }
}

TEST_F(HarnessFixture, ActingNeverReadsTheMaskToken) {
  ParameterSet poisoned = params;
  poisoned.at("contrastive/mask_token").fill(std::nan(""));
  Actor actor(0, 0.0, envs::make_environment(config.env, 9), *net, 1);
  InferenceService svc(*net);
  for (int t = 0; t < 12; ++t) {
    const auto clean = svc.infer(params, {actor.request()});
    const auto dirty = svc.infer(poisoned, {actor.request()});
    EXPECT_EQ(clean[0].q, dirty[0].q);
    actor.advance(clean[0]);
  }
  // the learner path does read it
  numerics::Tape tape(false);
  numerics::ParameterBinding b(tape, params, false);
  numerics::Rng rng(1);
  const auto seqs = collect(*net, params, 3, 3);
  const auto batch = as_batch(seqs, 0, 3);
  training_loss(*net, b, params, batch, plan_training_masks(*net, batch, rng));
  EXPECT_TRUE(b.accessed("contrastive/mask_token"));
}

TEST(Actor, ConsecutiveSequencesOverlapByTraceMinusPeriod) {
  Config c = tiny_config();
  c.replay.trace_length = 8;
  c.replay.replay_period = 4;
  c.replay.burn_in = 4;
  c.env.horizon = 22;
  auto net = make_network(c);
  numerics::Rng rng(1);
  const ParameterSet p = net->init_parameters(rng);
  Actor actor(0, 0.5, envs::make_environment(c.env, 2), *net, 3);
  InferenceService svc(*net);
  std::vector<replay::TransitionSequence> seqs;
  while (actor.take_returns().empty()) {
    actor.advance(svc.infer(p, {actor.request()})[0]);
    for (auto& s : actor.take_sequences()) seqs.push_back(std::move(s));
  }
  // starts 0, 4, ..., 20; the last two are padded tails
  ASSERT_EQ(seqs.size(), 6u);
  const replay::SequenceShape shape{8, net->observation_size(), net->num_actions(), c.core.lstm_size,
                                    c.transformer.num_layers, c.transformer.memory_size, c.transformer.d_model};
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    EXPECT_EQ(seqs[i].start_step, 4 * i);
    EXPECT_NO_THROW(replay::validate_sequence(seqs[i], shape));
    EXPECT_EQ(seqs[i].valid_length(), std::min<std::size_t>(8, 22 - 4 * i));
  }
  for (std::size_t i = 0; i + 1 < seqs.size(); ++i) {
    const auto& a = seqs[i];
    const auto& b = seqs[i + 1];
    std::size_t shared = 0;
    for (std::size_t k = 0; k < 4 && b.valid[k]; ++k) {
      EXPECT_EQ(a.actions[4 + k], b.actions[k]);
      EXPECT_EQ(a.rewards[4 + k], b.rewards[k]);
      EXPECT_EQ(a.prev_actions[4 + k], b.prev_actions[k]);
      for (std::size_t j = 0; j < a.observations.cols(); ++j)
        EXPECT_EQ(a.observations(4 + k, j), b.observations(k, j));
      ++shared;
    }
    EXPECT_EQ(shared, std::min<std::size_t>(4, b.valid_length()));
  }
  EXPECT_TRUE(seqs[4].terminal[5]);
  EXPECT_TRUE(seqs[5].terminal[seqs[5].valid_length() - 1]);
}

TEST(Actor, EpisodeStartResetsInputsAndState) {
  Config c = tiny_config();
  auto net = make_network(c);
  numerics::Rng rng(1);
  const ParameterSet p = net->init_parameters(rng);
  Actor actor(0, 0.5, envs::make_environment(c.env, 2), *net, 3);
  InferenceService svc(*net);
  for (std::size_t t = 0; t < c.env.horizon; ++t) actor.advance(svc.infer(p, {actor.request()})[0]);
  ASSERT_EQ(actor.take_returns().size(), 1u);
  EXPECT_EQ(actor.request().prev_action, 0u);
  EXPECT_EQ(actor.request().prev_reward, 0.0);
  EXPECT_EQ(actor.request().state, net->initial_state());
}

// Re-running every stored sequence from its stored state reproduces what the actor saw.
TEST_F(HarnessFixture, StoredStateFidelity) {
  const auto seqs = collect(*net, params, 12, 4);
  const std::size_t L = config.replay.trace_length, A = net->num_actions();
  for (const auto& s : seqs) {
    const std::size_t n = s.valid_length();
    numerics::Tape tape(false);
    numerics::ParameterBinding b(tape, params, false);
    model::StepBatch steps;
    steps.observations = Tensor::zeros(n, net->observation_size());
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t j = 0; j < net->observation_size(); ++j) steps.observations(k, j) = s.observations(k, j);
      steps.prev_actions.push_back(s.prev_actions[k]);
      steps.prev_rewards.push_back(s.prev_rewards[k]);
    }
    std::vector<const core::AgentState*> st{&s.initial_state};
    auto y = net->embed(b, steps);
    const Tensor q = net->unroll(b, y, y, 1, net->stack(st), true).q.value();
    double worst = 0.0;
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t a = 0; a < A; ++a) {
        worst = std::max(worst, std::abs(q(k, a) - s.behaviour_q(k, a)));
        // 32-bit level
        worst = std::max(worst, static_cast<double>(std::abs(static_cast<float>(q(k, a)) - static_cast<float>(s.behaviour_q(k, a)))));
      }
    EXPECT_LE(worst, 1e-5) << "start " << s.start_step << " of " << L;
  }
}

// ---- learner ---------------------------------------------------------------------------

TEST_F(HarnessFixture, TargetUpdatesEvery400Steps) {
  ASSERT_EQ(config.learner.target_update_period, 400u);
  const auto seqs = collect(*net, params, 24, 6);
  Learner learner(*net, params, 7);
  EXPECT_TRUE(learner.target().same_values(learner.online()));
  for (std::size_t i = 0; i < 399; ++i) ASSERT_TRUE(learner.step(as_batch(seqs, i, 3)).applied);
  EXPECT_FALSE(learner.target().same_values(learner.online()));
  EXPECT_TRUE(learner.target().same_values(params));
  learner.step(as_batch(seqs, 399, 3));
  EXPECT_EQ(learner.steps(), 400u);
  EXPECT_TRUE(learner.target().same_values(learner.online()));
  learner.step(as_batch(seqs, 400, 3));
  EXPECT_FALSE(learner.target().same_values(learner.online()));
}

TEST_F(HarnessFixture, SnapshotsPublishEveryInterval) {
  ASSERT_EQ(config.learner.publish_interval, 10u);
  const auto seqs = collect(*net, params, 8, 6);
  Learner learner(*net, params, 7);
  for (std::size_t i = 1; i <= 25; ++i) {
    learner.step(as_batch(seqs, i, 2));
    EXPECT_EQ(learner.snapshot_step(), i - i % 10);
    EXPECT_LT(learner.steps() - learner.snapshot_step(), 10u);
  }
  EXPECT_FALSE(learner.snapshot()->same_values(learner.online()));
}

TEST_F(HarnessFixture, LearnerStepsAreDeterministic) {
  const auto seqs = collect(*net, params, 10, 8);
  Learner a(*net, params, 9), b(*net, params, 9);
  for (std::size_t i = 0; i < 5; ++i) {
    const auto batch = as_batch(seqs, 2 * i, 3);
    const auto ra = a.step(batch);
    const auto rb = b.step(batch);
    EXPECT_TRUE(bit_equal(ra.loss_total, rb.loss_total));
    EXPECT_EQ(ra.priorities, rb.priorities);
  }
  EXPECT_TRUE(a.online().same_values(b.online()));
  Learner c(*net, params, 10);
  for (std::size_t i = 0; i < 5; ++i) c.step(as_batch(seqs, 2 * i, 3));
  EXPECT_FALSE(a.online().same_values(c.online()));  // mask plans differ
}

TEST_F(HarnessFixture, LossTermsAndPriorities) {
  const auto seqs = collect(*net, params, 6, 12);
  const auto batch = as_batch(seqs, 0, 3);
  numerics::Rng rng(3);
  const auto plan = plan_training_masks(*net, batch, rng);
  EXPECT_EQ(plan.length, config.replay.trace_length - config.replay.effective_burn_in());
  numerics::Tape tape(true);
  numerics::ParameterBinding b(tape, params, true);
  const LossTerms l = training_loss(*net, b, params, batch, plan);
  EXPECT_NEAR(l.total.value()[0], l.rl_value + config.contrastive.loss_weight * l.aux_value, 1e-12);
  EXPECT_GT(l.aux_value, 0.0);
  ASSERT_EQ(l.priorities.size(), 3u);
  const std::size_t T = plan.length;
  for (std::size_t s = 0; s < 3; ++s) {
    std::vector<double> d;
    for (std::size_t k = 0; k < T; ++k)
      if (batch.sequences[s]->valid[config.replay.effective_burn_in() + k]) d.push_back(l.td[s * T + k]);
      else EXPECT_EQ(l.td[s * T + k], 0.0);
    // tails whose valid steps all fall in the burn-in carry no loss
    const double expected = d.empty() ? 0.0 : rl::priority_from_tds(d, config.rl.priority_eta);
    EXPECT_NEAR(l.priorities[s], expected, 1e-15);
  }
}

TEST_F(HarnessFixture, ZeroContrastiveWeightRemovesItsGradient) {
  const auto seqs = collect(*net, params, 6, 13);
  const auto batch = as_batch(seqs, 0, 3);
  auto grads_for = [&](const Config& c, const ParameterSet& p, bool rl_only) {
    model::CoberlNetwork n(c, net->encoder().observation_shape(), net->num_actions());
    numerics::Rng rng(4);
    const auto plan = plan_training_masks(n, batch, rng);
    numerics::Tape tape(true);
    numerics::ParameterBinding b(tape, p, true);
    const LossTerms l = training_loss(n, b, p, batch, plan);
    tape.backward(rl_only ? l.rl : l.total);
    return std::make_pair(l.total.value()[0], b.gradients());
  };
  Config off = config;
  off.contrastive.loss_weight = 0.0;
  off.learner.rl_pass_masked = false;
  const auto [loss0, g0] = grads_for(off, params, false);

  // Perturbing the contrastive-only parameters changes nothing.
  ParameterSet moved = params;
  for (const char* name : {"critic/w", "contrastive/mask_token"})
    for (auto& v : moved.at(name).values()) v += 0.5;
  const auto [loss1, g1] = grads_for(off, moved, false);
  EXPECT_TRUE(bit_equal(loss0, loss1));
  for (const auto& [name, g] : g0) EXPECT_EQ(g, g1.at(name)) << name;
  EXPECT_EQ(numerics::max_abs(g0.at("critic/w")), 0.0);
  EXPECT_EQ(numerics::max_abs(g0.at("contrastive/mask_token")), 0.0);

  // Same as the RL part of the weighted loss.
  Config on = off;
  on.contrastive.loss_weight = 1.0;
  const auto [loss_on, g_rl] = grads_for(on, params, true);
  for (const auto& [name, g] : g0) EXPECT_LE(testing::max_abs_diff(g, g_rl.at(name)), 1e-12) << name;
  const auto [unused, g_total] = grads_for(on, params, false);
  EXPECT_GT(numerics::max_abs(g_total.at("critic/w")), 0.0);
  EXPECT_GT(numerics::max_abs(g_total.at("contrastive/mask_token")), 0.0);
}

TEST_F(HarnessFixture, NonFiniteLossAbortsThenHalts) {
  const auto seqs = collect(*net, params, 4, 14);
  ParameterSet broken = params;
  broken.at("core/head/value/b").fill(std::nan(""));
  Learner learner(*net, broken, 1);
  for (int i = 0; i < 2; ++i) {
    const auto r = learner.step(as_batch(seqs, 0, 2));
    EXPECT_FALSE(r.applied);
    EXPECT_NE(r.diagnostic.find("aborted"), std::string::npos);
  }
  EXPECT_EQ(learner.steps(), 0u);
  EXPECT_EQ(learner.consecutive_aborts(), 2u);
  EXPECT_THROW(learner.step(as_batch(seqs, 0, 2)), HarnessError);
}

// ---- evaluation and full runs ----------------------------------------------------------

TEST(Evaluator, FinalWindowAverages) {
  std::vector<EvalReport> reports;
  for (std::uint64_t s : {0u, 500u, 900u, 949u, 950u, 975u, 1000u})
    reports.push_back({s, static_cast<double>(s), {}});
  EXPECT_NEAR(final_window_summary(reports, 1000), (950.0 + 975 + 1000) / 3, 1e-12);
}

TEST(Evaluator, DeterministicEnvGreedyPolicyRepeats) {
  Config c = tiny_config();
  c.env.id = "bandit";
  c.env.payouts = {0.2, 1.0, -0.5};
  auto net = make_network(c);
  numerics::Rng rng(1);
  const ParameterSet p = net->init_parameters(rng);
  auto env = envs::make_environment(c.env, 2);
  const EvalReport r = evaluate(*net, p, *env, 5, 0.0, rng, 42);
  ASSERT_EQ(r.returns.size(), 5u);
  for (double v : r.returns) EXPECT_EQ(v, r.returns[0]);
  EXPECT_EQ(r.mean_return, r.returns[0]);
  EXPECT_EQ(r.step, 42u);
}

TEST(Evaluator, EpisodesResetState) {
  Config c = tiny_config();
  auto net = make_network(c);
  numerics::Rng rng(1);
  const ParameterSet p = net->init_parameters(rng);
  // two fresh environments with the same seed see the same first episode
  auto e1 = envs::make_environment(c.env, 3);
  auto e2 = envs::make_environment(c.env, 3);
  numerics::Rng r1(5), r2(5);
  const auto a = run_episodes(*net, p, *e1, 3, 0.0, r1);
  const auto b = run_episodes(*net, p, *e2, 3, 0.0, r2);
  EXPECT_EQ(a, b);
  for (double v : a) EXPECT_TRUE(v == 1.0 || v == -1.0);
}

bool same_rows(const std::vector<metrics::MetricsRow>& a, const std::vector<metrics::MetricsRow>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& x = a[i];
    const auto& y = b[i];
    for (auto [u, v] : {std::pair{x.step, y.step}, {x.episode_return, y.episode_return},
                        {x.eval_return, y.eval_return}, {x.loss_rl, y.loss_rl},
                        {x.loss_contrastive, y.loss_contrastive}, {x.priority_mean, y.priority_mean},
                        {x.epsilon_mean, y.epsilon_mean}})
      if (!bit_equal(u, v)) return false;
  }
  return true;
}

TEST(Run, SingleThreadedRunsAreReproducible) {
  const Config c = tiny_config();
  const RunResult a = run_training(c);
  const RunResult b = run_training(c);
  EXPECT_TRUE(same_rows(a.rows, b.rows));
  EXPECT_TRUE(a.final_params.same_values(b.final_params));
  EXPECT_EQ(a.env_steps, 600u);
  EXPECT_EQ(a.learner_steps, b.learner_steps);
  EXPECT_GT(a.learner_steps, 0u);
  EXPECT_EQ(a.rows.front().step, 0.0);
  EXPECT_EQ(a.rows.back().step, 600.0);
  EXPECT_EQ(a.evals.size(), a.rows.size());
  Config other = c;
  other.run.seed = 12;
  EXPECT_FALSE(run_training(other).final_params.same_values(a.final_params));
}

TEST(Run, RowCallbackSeesEveryRow) {
  const Config c = tiny_config();
  std::size_t seen = 0;
  const RunResult r = run_training(c, [&](const metrics::MetricsRow&) { ++seen; });
  EXPECT_EQ(seen, r.rows.size());
  // steps 0, 200, 400, 600
  EXPECT_EQ(r.rows.size(), 4u);
  for (const auto& row : r.rows) EXPECT_NEAR(row.epsilon_mean, (0.4 + std::pow(0.4, 8.0)) / 2, 1e-15);
}

TEST(Run, ThreadedModeCompletes) {
  Config c = tiny_config();
  c.run.mode = RunMode::kThreaded;
  c.run.inference_batch = 2;
  const RunResult r = run_training(c);
  EXPECT_GE(r.env_steps, 600u);
  EXPECT_GT(r.sequences_inserted, 0u);
  EXPECT_GT(r.inference_batches, 0u);
}

TEST(Run, InvalidConfigIsRejected) {
  Config c = tiny_config();
  c.replay.burn_in = 6;
  EXPECT_THROW(run_training(c), ConfigError);
}

}  // namespace
}  // namespace coberl

#include "coberl/harness/learner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "coberl/error.hpp"

namespace coberl::harness {

namespace {

struct Segment {
  model::StepBatch steps;
  std::size_t length = 0;
};

// Input rows [begin, begin + count) of every sequence, sequence-major.
Segment gather(const TrainingBatch& batch, std::size_t begin, std::size_t count, std::size_t obs_size) {
  Segment s;
  s.length = count;
  const std::size_t B = batch.sequences.size();
  s.steps.observations = numerics::Tensor::zeros(B * count, obs_size);
  s.steps.prev_actions.resize(B * count);
  s.steps.prev_rewards.resize(B * count);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& seq = *batch.sequences[b];
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t row = b * count + k, src = begin + k;
      std::copy(seq.observations.data() + src * obs_size, seq.observations.data() + (src + 1) * obs_size,
                s.steps.observations.data() + row * obs_size);
      s.steps.prev_actions[row] = seq.prev_actions[src];
      s.steps.prev_rewards[row] = seq.prev_rewards[src];
    }
  }
  return s;
}

// Runs the burn-in prefix without gradients and returns the refreshed state.
model::BatchState burn_in(const model::CoberlNetwork& net, const ParameterSet& params, const TrainingBatch& batch,
                          std::size_t burn) {
  std::vector<const core::AgentState*> states;
  for (const auto& s : batch.sequences) states.push_back(&s->initial_state);
  model::BatchState state = net.stack(states);
  if (burn == 0) return state;
  numerics::Tape tape(false);
  ParameterBinding p(tape, params, false);
  const Segment seg = gather(batch, 0, burn, net.observation_size());
  Var y = net.embed(p, seg.steps);
  auto u = net.unroll(p, y, y, batch.sequences.size(), state, true);
  return {u.memory, u.hidden.value(), u.cell.value()};
}

}  // namespace

TrainingBatch make_batch(const std::vector<replay::PrioritizedSample>& samples) {
  TrainingBatch b;
  for (const auto& s : samples) {
    b.sequences.push_back(s.sequence);
    b.weights.push_back(s.weight);
  }
  return b;
}

contrastive::MaskPlan plan_training_masks(const model::CoberlNetwork& net, const TrainingBatch& batch, Rng& rng) {
  const auto& cfg = net.config();
  const std::size_t L = cfg.replay.trace_length, burn = cfg.replay.effective_burn_in();
  const std::size_t T = L - burn, B = batch.sequences.size();
  std::vector<std::uint8_t> valid(B * T);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < T; ++k) valid[b * T + k] = batch.sequences[b]->valid[burn + k];
  return contrastive::plan_masks(B, T, cfg.contrastive.mask_rate, rng, valid);
}

LossTerms training_loss(const model::CoberlNetwork& net, ParameterBinding& online, const ParameterSet& target,
                        const TrainingBatch& batch, const contrastive::MaskPlan& plan) {
  using namespace numerics;
  const Config& cfg = net.config();
  const std::size_t B = batch.sequences.size();
  const std::size_t L = cfg.replay.trace_length, burn = cfg.replay.effective_burn_in();
  if (B == 0) throw InputError("training_loss: empty batch");
  if (batch.weights.size() != B) throw InputError("training_loss: one importance weight per sequence expected");
  if (burn >= L) throw ConfigError("burn-in must be shorter than the trace");
  const std::size_t T = L - burn;
  const std::size_t A = net.num_actions();
  for (const auto& s : batch.sequences)
    if (s->length() != L) throw InputError("training_loss: sequence length does not match trace length");

  // Target network: burn-in then the training segment plus the bootstrap input, unmasked and causal.
  std::vector<double> q_boot(B * (T + 1));
  {
    const model::BatchState tstate = burn_in(net, target, batch, burn);
    Tape tape(false);
    ParameterBinding p(tape, target, false);
    const Segment seg = gather(batch, burn, T + 1, net.observation_size());
    Var y = net.embed(p, seg.steps);
    const Tensor& q = net.unroll(p, y, y, B, tstate, true).q.value();
    const rl::ValueTransform vt{cfg.rl.value_transform, cfg.rl.transform_epsilon};
    for (std::size_t r = 0; r < B * (T + 1); ++r) {
      double mx = -std::numeric_limits<double>::infinity(), mean = 0.0;
      for (std::size_t a = 0; a < A; ++a) {
        mx = std::max(mx, q(r, a));
        mean += rl::inverse_transform(q(r, a), vt) / static_cast<double>(A);
      }
      const double raw_max = rl::inverse_transform(mx, vt);
      q_boot[r] = cfg.rl.target_policy == TargetPolicy::kMax
                      ? raw_max
                      : (1.0 - cfg.rl.target_epsilon) * raw_max + cfg.rl.target_epsilon * mean;
    }
  }

  // Online network.
  const model::BatchState state = burn_in(net, online.params(), batch, burn);
  const Segment seg = gather(batch, burn, T, net.observation_size());
  Var y = net.embed(online, seg.steps);

  LossTerms out;
  const bool contrast = cfg.contrastive.loss_weight > 0.0;
  Var rl_input = y;
  if (contrast) {
    if (plan.batch != B || plan.length != T) throw InputError("training_loss: mask plan shape mismatch");
    auto masked = contrastive::apply_masking(online, cfg.contrastive, y, plan);
    auto xc = net.transformer().forward(online, masked.masked_inputs, B, state.memory, false);
    auto aux = contrastive::compute_aux_loss(contrastive::critic_embed(online, xc.output),
                                             contrastive::critic_embed(online, masked.targets), masked.mask_ext,
                                             cfg.contrastive.kl_weight);
    out.aux = aux.loss;
    out.aux_value = aux.loss.value()[0];
    if (cfg.learner.rl_pass_masked) rl_input = masked.masked_inputs;
  }
  auto u = net.unroll(online, y, rl_input, B, state, true);

  // Peng's Q(lambda) targets over the valid prefix of each training segment.
  std::vector<double> targets(B * T, 0.0), weights(B * T, 0.0);
  std::vector<std::size_t> actions(B * T, 0);
  std::vector<std::uint8_t> valid(B * T, 0);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& s = *batch.sequences[b];
    std::size_t n = 0;
    while (n < T && s.valid[burn + n]) ++n;
    for (std::size_t k = 0; k < T; ++k) {
      actions[b * T + k] = s.actions[burn + k];
      weights[b * T + k] = batch.weights[b];
      valid[b * T + k] = k < n;
    }
    if (n == 0) continue;
    std::vector<double> boot(n + 1);
    for (std::size_t k = 0; k <= n; ++k) boot[k] = q_boot[b * (T + 1) + k];
    const auto g = rl::peng_targets(std::span(s.rewards).subspan(burn, n), boot,
                                    std::span(s.terminal).subspan(burn, n), cfg.rl.lambda, cfg.rl.discount);
    std::copy(g.begin(), g.end(), targets.begin() + static_cast<std::ptrdiff_t>(b * T));
  }
  const rl::ValueTransform vt{cfg.rl.value_transform, cfg.rl.transform_epsilon};
  auto ql = rl::q_lambda_loss(u.q, actions, targets, weights, valid, vt);
  out.rl = ql.loss;
  out.rl_value = ql.loss.value()[0];
  out.td = std::move(ql.td);
  out.total = contrast ? add(out.rl, scale(out.aux, cfg.contrastive.loss_weight)) : out.rl;

  out.priorities.resize(B, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<double> d;
    for (std::size_t k = 0; k < T; ++k)
      if (valid[b * T + k]) d.push_back(out.td[b * T + k]);
    if (!d.empty()) out.priorities[b] = rl::priority_from_tds(d, cfg.rl.priority_eta);
  }
  return out;
}

Learner::Learner(const model::CoberlNetwork& net, ParameterSet initial, std::uint64_t seed)
    : net_(&net),
      online_(std::move(initial)),
      target_(online_),
      adam_({net.config().optimizer.learning_rate, net.config().optimizer.beta1, net.config().optimizer.beta2,
             net.config().optimizer.epsilon}),
      rng_(seed) {
  publish();
}

void Learner::publish() {
  auto snap = std::make_shared<const ParameterSet>(online_);
  std::lock_guard lock(snapshot_mutex_);
  snapshot_ = std::move(snap);
  snapshot_step_ = steps_;
}

std::shared_ptr<const ParameterSet> Learner::snapshot() const {
  std::lock_guard lock(snapshot_mutex_);
  return snapshot_;
}

std::uint64_t Learner::snapshot_step() const {
  std::lock_guard lock(snapshot_mutex_);
  return snapshot_step_;
}

LearnerReport Learner::step(const TrainingBatch& batch) {
  const Config& cfg = net_->config();
  LearnerReport report;
  const auto plan = plan_training_masks(*net_, batch, rng_);

  numerics::Tape tape(true);
  ParameterBinding p(tape, online_, true);
  LossTerms loss = training_loss(*net_, p, target_, batch, plan);
  report.loss_total = loss.total.value()[0];
  report.loss_rl = loss.rl_value;
  report.loss_contrastive = loss.aux_value;
  report.priorities = loss.priorities;

  auto abort = [&](const std::string& why) {
    report.applied = false;
    report.diagnostic = "learner step " + std::to_string(steps_ + 1) + " aborted: " + why;
    if (++aborts_ >= cfg.learner.max_consecutive_aborts)
      throw HarnessError(report.diagnostic + " (" + std::to_string(aborts_) + " consecutive aborts, halting)");
    return report;
  };
  if (!std::isfinite(report.loss_total)) return abort("non-finite loss " + std::to_string(report.loss_total));

  tape.backward(loss.total);
  auto grads = p.gradients();
  report.grad_norm = numerics::global_norm(grads);
  if (!std::isfinite(report.grad_norm)) return abort("non-finite gradient norm");
  grads = numerics::clip_global_norm(grads, cfg.optimizer.clip_norm);
  online_ = numerics::adam_step(online_, grads, adam_);
  aborts_ = 0;
  ++steps_;
  report.applied = true;
  if (steps_ % cfg.learner.target_update_period == 0) {
    const auto version = target_.version();
    target_ = online_;
    target_.set_version(version + 1);
  }
  if (steps_ % cfg.learner.publish_interval == 0) publish();
  return report;
}

}  // namespace coberl::harness

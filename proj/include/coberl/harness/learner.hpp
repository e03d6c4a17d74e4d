#pragma once

#include <cstdint>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "coberl/contrastive/contrastive.hpp"
#include "coberl/model/network.hpp"
#include "coberl/numerics/optimizer.hpp"
#include "coberl/replay/replay.hpp"
#include "coberl/rl/losses.hpp"

namespace coberl::harness {

using numerics::ParameterBinding;
using numerics::ParameterSet;
using numerics::Rng;
using numerics::Var;

struct TrainingBatch {
  std::vector<std::shared_ptr<const replay::TransitionSequence>> sequences;
  std::vector<double> weights;  // importance weights, one per sequence
};

TrainingBatch make_batch(const std::vector<replay::PrioritizedSample>& samples);

/// Mask plan over the post-burn-in segment of every sequence, valid steps only.
contrastive::MaskPlan plan_training_masks(const model::CoberlNetwork& net, const TrainingBatch& batch, Rng& rng);

struct LossTerms {
  Var total;
  Var rl;
  Var aux;                       // absent (tape == nullptr) when the contrastive pass is skipped
  std::vector<double> td;        // [B * T_train], zero on invalid rows
  std::vector<double> priorities;
  double rl_value = 0.0;
  double aux_value = 0.0;
};

/// Full learner loss on `online`'s tape: no-grad burn-in from stored states,
/// non-causal contrastive pass on masked inputs, causal RL pass, Peng's Q(lambda)
/// targets from `target`. The contrastive pass runs only when its weight is positive.
LossTerms training_loss(const model::CoberlNetwork& net, ParameterBinding& online, const ParameterSet& target,
                        const TrainingBatch& batch, const contrastive::MaskPlan& plan);

struct LearnerReport {
  bool applied = false;
  double loss_total = 0.0;
  double loss_rl = 0.0;
  double loss_contrastive = 0.0;
  double grad_norm = 0.0;
  std::vector<double> priorities;
  std::string diagnostic;
};

/// Owns theta, theta' and the optimizer; publishes immutable snapshots.
class Learner {
 public:
  Learner(const model::CoberlNetwork& net, ParameterSet initial, std::uint64_t seed);

  /// One update. Non-finite losses or gradients abort the step; after
  /// max_consecutive_aborts in a row the learner halts and throws HarnessError.
  LearnerReport step(const TrainingBatch& batch);

  const ParameterSet& online() const { return online_; }
  const ParameterSet& target() const { return target_; }
  std::uint64_t steps() const { return steps_; }
  std::size_t consecutive_aborts() const { return aborts_; }
  const numerics::AdamState& optimizer() const { return adam_; }

  std::shared_ptr<const ParameterSet> snapshot() const;
  std::uint64_t snapshot_step() const;

 private:
  void publish();

  const model::CoberlNetwork* net_;
  ParameterSet online_;
  ParameterSet target_;
  numerics::AdamState adam_;
  Rng rng_;
  std::uint64_t steps_ = 0;
  std::size_t aborts_ = 0;

  mutable std::mutex snapshot_mutex_;
  std::shared_ptr<const ParameterSet> snapshot_;
  std::uint64_t snapshot_step_ = 0;
};

}  // namespace coberl::harness

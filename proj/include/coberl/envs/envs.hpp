#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "coberl/config.hpp"
#include "coberl/model/encoder.hpp"
#include "coberl/numerics/parameters.hpp"

namespace coberl::envs {

using encoder::ObservationShape;
using numerics::Tensor;

struct EnvStep {
  Tensor observation;  // [H, W, C], values in [0, 1]
  double reward = 0.0;
  bool terminal = false;
};

class Environment {
 public:
  virtual ~Environment() = default;
  virtual ObservationShape observation_shape() const = 0;
  virtual std::size_t num_actions() const = 0;
  /// Maximum episode length.
  virtual std::size_t horizon() const = 0;
  virtual Tensor reset() = 0;
  /// Throws InputError after a terminal step until reset().
  virtual EnvStep step(std::size_t action) = 0;
};

/// Shows one of K cues at t=0, noise until t=H-1, then asks for the cue.
/// Channel 0: cue block at t=0 (cells with index % K == cue), noise later.
/// Channel 1: noise. Channel 2: all ones on the query step.
class CueRecall final : public Environment {
 public:
  CueRecall(std::size_t horizon, std::size_t num_cues, double noise, std::uint64_t seed);

  ObservationShape observation_shape() const override { return {5, 5, 3}; }
  std::size_t num_actions() const override { return num_cues_; }
  std::size_t horizon() const override { return horizon_; }
  Tensor reset() override;
  EnvStep step(std::size_t action) override;

  std::size_t cue() const { return cue_; }
  std::size_t time() const { return t_; }

 private:
  Tensor observe();

  std::size_t horizon_;
  std::size_t num_cues_;
  double noise_;
  numerics::Rng rng_;
  std::size_t cue_ = 0;
  std::size_t t_ = 0;
  bool done_ = true;
};

/// One-step episodes paying table[action]. The observation is a single zero.
class Bandit final : public Environment {
 public:
  Bandit(std::vector<double> payouts, std::uint64_t seed);

  ObservationShape observation_shape() const override { return {1, 1, 1}; }
  std::size_t num_actions() const override { return payouts_.size(); }
  std::size_t horizon() const override { return 1; }
  Tensor reset() override;
  EnvStep step(std::size_t action) override;

 private:
  std::vector<double> payouts_;
  bool done_ = true;
};

/// Registry keyed by EnvConfig::id ("cue_recall", "bandit").
std::unique_ptr<Environment> make_environment(const EnvConfig& config, std::uint64_t seed);
std::vector<std::string> environment_ids();

}  // namespace coberl::envs

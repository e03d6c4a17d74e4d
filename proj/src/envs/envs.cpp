#include "coberl/envs/envs.hpp"

#include "coberl/error.hpp"

namespace coberl::envs {

CueRecall::CueRecall(std::size_t horizon, std::size_t num_cues, double noise, std::uint64_t seed)
    : horizon_(horizon), num_cues_(num_cues), noise_(noise), rng_(seed) {
  if (horizon_ < 3) throw ConfigError("cue_recall: horizon must be >= 3, got " + std::to_string(horizon_));
  if (num_cues_ < 2 || num_cues_ > 25) throw ConfigError("cue_recall: cue count must lie in [2, 25]");
  if (!(noise_ >= 0.0 && noise_ <= 1.0)) throw ConfigError("cue_recall: noise must lie in [0, 1]");
}

Tensor CueRecall::observe() {
  Tensor obs({5, 5, 3});
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t cell = 0; cell < 25; ++cell) {
    if (t_ == 0) {
      obs[cell * 3 + 0] = cell % num_cues_ == cue_ ? 1.0 : 0.0;
    } else {
      obs[cell * 3 + 0] = noise_ * u(rng_);
    }
    obs[cell * 3 + 1] = noise_ * u(rng_);
    obs[cell * 3 + 2] = t_ + 1 == horizon_ ? 1.0 : 0.0;
  }
  return obs;
}

Tensor CueRecall::reset() {
  cue_ = std::uniform_int_distribution<std::size_t>(0, num_cues_ - 1)(rng_);
  t_ = 0;
  done_ = false;
  return observe();
}

EnvStep CueRecall::step(std::size_t action) {
  if (done_) throw InputError("cue_recall: step after terminal; call reset()");
  if (action >= num_cues_) throw InputError("cue_recall: action out of range");
  EnvStep s;
  if (t_ + 1 == horizon_) {
    s.reward = action == cue_ ? 1.0 : -1.0;
    s.terminal = true;
    done_ = true;
    ++t_;
    s.observation = Tensor({5, 5, 3});
    return s;
  }
  ++t_;
  s.observation = observe();
  return s;
}

Bandit::Bandit(std::vector<double> payouts, std::uint64_t) : payouts_(std::move(payouts)) {
  if (payouts_.size() < 2) throw ConfigError("bandit: need at least two arms");
}

Tensor Bandit::reset() {
  done_ = false;
  return Tensor({1, 1, 1});
}

EnvStep Bandit::step(std::size_t action) {
  if (done_) throw InputError("bandit: step after terminal; call reset()");
  if (action >= payouts_.size()) throw InputError("bandit: action out of range");
  done_ = true;
  return {Tensor({1, 1, 1}), payouts_[action], true};
}

std::unique_ptr<Environment> make_environment(const EnvConfig& config, std::uint64_t seed) {
  if (config.id == "cue_recall") return std::make_unique<CueRecall>(config.horizon, config.num_cues, config.noise, seed);
  if (config.id == "bandit") return std::make_unique<Bandit>(config.payouts, seed);
  throw ConfigError("unknown environment id '" + config.id + "'");
}

std::vector<std::string> environment_ids() { return {"bandit", "cue_recall"}; }

}  // namespace coberl::envs

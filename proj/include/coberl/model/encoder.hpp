#pragma once

#include <cstddef>
#include <span>
#include <string>

#include "coberl/config.hpp"
#include "coberl/numerics/parameters.hpp"

namespace coberl::encoder {

using numerics::ParameterBinding;
using numerics::ParameterSet;
using numerics::Rng;
using numerics::Tensor;
using numerics::Var;

struct ObservationShape {
  std::size_t height = 5;
  std::size_t width = 5;
  std::size_t channels = 3;

  std::size_t size() const { return height * width * channels; }
  friend bool operator==(const ObservationShape&, const ObservationShape&) = default;
};

/// Observation encoder plus previous action/reward projection.
///
/// Produces Y_t = [encode(x_t) || embed(a_{t-1}, r_{t-1})] of width d_model.
/// Observations enter as rows of a [N, H*W*C] tensor (row-major [H, W, C]).
class Encoder {
 public:
  Encoder(const EncoderConfig& config, ObservationShape obs_shape, std::size_t num_actions, std::size_t d_model);

  std::size_t observation_width() const { return d_model_ - config_.action_reward_size; }
  std::size_t action_reward_width() const { return config_.action_reward_size; }
  std::size_t d_model() const { return d_model_; }
  std::size_t num_actions() const { return num_actions_; }
  const ObservationShape& observation_shape() const { return obs_shape_; }

  void init_parameters(ParameterSet& params, Rng& rng) const;

  Var encode_observations(ParameterBinding& p, const Tensor& observations) const;
  Var embed_action_reward(ParameterBinding& p, std::span<const std::size_t> prev_actions,
                          std::span<const double> prev_rewards) const;
  Var build_input_embedding(ParameterBinding& p, const Tensor& observations,
                            std::span<const std::size_t> prev_actions, std::span<const double> prev_rewards) const;

  // Single-observation conveniences over an unrecorded tape.
  Tensor encode_observation(const ParameterSet& params, const Tensor& observation) const;
  Tensor embed_action_reward(const ParameterSet& params, std::size_t prev_action, double prev_reward) const;
  Tensor build_input_embedding(const ParameterSet& params, const Tensor& observation, std::size_t prev_action,
                               double prev_reward) const;

 private:
  Var conv(ParameterBinding& p, const std::string& name, Var x, std::size_t batch, std::size_t height,
           std::size_t width, std::size_t kernel, std::size_t stride) const;
  Var linear(ParameterBinding& p, const std::string& name, Var x) const;

  EncoderConfig config_;
  ObservationShape obs_shape_;
  std::size_t num_actions_;
  std::size_t d_model_;
};

}  // namespace coberl::encoder

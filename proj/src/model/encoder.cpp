#include "coberl/model/encoder.hpp"

#include "coberl/error.hpp"

namespace coberl::encoder {

namespace {

void add_dense(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
  params.add(name + "/w", numerics::truncated_normal(in, out, in, rng));
  params.add(name + "/b", Tensor::zeros(1, out));
}

}  // namespace

Encoder::Encoder(const EncoderConfig& config, ObservationShape obs_shape, std::size_t num_actions, std::size_t d_model)
    : config_(config), obs_shape_(obs_shape), num_actions_(num_actions), d_model_(d_model) {
  if (config_.action_reward_size >= d_model_)
    throw ConfigError("encoder: action/reward width must be smaller than d_model");
  if (num_actions_ == 0) throw ConfigError("encoder: need at least one action");
  if (obs_shape_.size() == 0) throw ConfigError("encoder: empty observation shape");
  if (config_.preset != EncoderPreset::kFlat) {
    if (config_.mlp_sizes.empty() || config_.mlp_sizes.back() != observation_width())
      throw ConfigError("encoder: MLP output " +
                        std::to_string(config_.mlp_sizes.empty() ? 0 : config_.mlp_sizes.back()) +
                        " does not equal d_model - action_reward_size = " + std::to_string(observation_width()));
    for (const auto& g : config_.groups)
      if (g.outer_channels % config_.group_size != 0)
        throw ConfigError("encoder: channels " + std::to_string(g.outer_channels) + " not divisible by group size " +
                          std::to_string(config_.group_size));
  }
}

void Encoder::init_parameters(ParameterSet& params, Rng& rng) const {
  const std::size_t C = obs_shape_.channels;
  if (config_.preset == EncoderPreset::kFlat) {
    add_dense(params, "encoder/flat", obs_shape_.size(), observation_width(), rng);
  } else {
    add_dense(params, "encoder/stem", 9 * C, config_.stem_channels, rng);
    std::size_t channels = config_.stem_channels;
    for (std::size_t gi = 0; gi < config_.groups.size(); ++gi) {
      const auto& g = config_.groups[gi];
      for (std::size_t bi = 0; bi < g.blocks; ++bi) {
        const std::string block = "encoder/group" + std::to_string(gi) + "/block" + std::to_string(bi);
        add_dense(params, block + "/reduce", channels, g.inner_channels, rng);
        add_dense(params, block + "/conv", 9 * g.inner_channels, g.inner_channels, rng);
        add_dense(params, block + "/expand", g.inner_channels, g.outer_channels, rng);
        if (channels != g.outer_channels) add_dense(params, block + "/project", channels, g.outer_channels, rng);
        channels = g.outer_channels;
      }
      const std::string norm = "encoder/group" + std::to_string(gi) + "/norm";
      params.add(norm + "/gamma", Tensor({1, channels}, 1.0));
      params.add(norm + "/beta", Tensor::zeros(1, channels));
    }
    std::size_t height = obs_shape_.height, width = obs_shape_.width;
    height = numerics::conv_output_extent(height, 3, config_.stem_stride);
    width = numerics::conv_output_extent(width, 3, config_.stem_stride);
    std::size_t in = height * width * channels;
    for (std::size_t li = 0; li < config_.mlp_sizes.size(); ++li) {
      add_dense(params, "encoder/mlp" + std::to_string(li), in, config_.mlp_sizes[li], rng);
      in = config_.mlp_sizes[li];
    }
  }
  add_dense(params, "encoder/action_reward", num_actions_ + 1, config_.action_reward_size, rng);
}

Var Encoder::linear(ParameterBinding& p, const std::string& name, Var x) const {
  return numerics::add_row(numerics::matmul(x, p(name + "/w")), p(name + "/b"));
}

Var Encoder::conv(ParameterBinding& p, const std::string& name, Var x, std::size_t batch, std::size_t height,
                  std::size_t width, std::size_t kernel, std::size_t stride) const {
  if (kernel == 1 && stride == 1) return linear(p, name, x);
  const numerics::ImageLayout layout{batch, height, width, x.cols()};
  return linear(p, name, numerics::im2col(x, layout, kernel, stride));
}

Var Encoder::encode_observations(ParameterBinding& p, const Tensor& observations) const {
  using namespace numerics;
  if (observations.cols() != obs_shape_.size())
    throw ConfigError("encoder: observation width " + std::to_string(observations.cols()) + " does not match " +
                      std::to_string(obs_shape_.size()));
  Tape& tape = p.tape();
  const std::size_t n = observations.rows();
  if (config_.preset == EncoderPreset::kFlat) {
    return relu(linear(p, "encoder/flat", tape.constant(observations)));
  }
  Var x = tape.constant(observations.reshaped({n * obs_shape_.height * obs_shape_.width, obs_shape_.channels}));
  std::size_t height = obs_shape_.height, width = obs_shape_.width;
  x = conv(p, "encoder/stem", x, n, height, width, 3, config_.stem_stride);
  height = conv_output_extent(height, 3, config_.stem_stride);
  width = conv_output_extent(width, 3, config_.stem_stride);
  std::size_t channels = config_.stem_channels;
  for (std::size_t gi = 0; gi < config_.groups.size(); ++gi) {
    const auto& g = config_.groups[gi];
    for (std::size_t bi = 0; bi < g.blocks; ++bi) {
      const std::string block = "encoder/group" + std::to_string(gi) + "/block" + std::to_string(bi);
      Var h = relu(x);
      h = relu(linear(p, block + "/reduce", h));
      h = relu(conv(p, block + "/conv", h, n, height, width, 3, 1));
      h = linear(p, block + "/expand", h);
      Var skip = channels != g.outer_channels ? linear(p, block + "/project", x) : x;
      x = add(skip, h);
      channels = g.outer_channels;
    }
    const std::string norm = "encoder/group" + std::to_string(gi) + "/norm";
    x = group_norm(x, p(norm + "/gamma"), p(norm + "/beta"), n, config_.group_size);
  }
  x = reshape(relu(x), n, height * width * channels);
  for (std::size_t li = 0; li < config_.mlp_sizes.size(); ++li) {
    x = relu(linear(p, "encoder/mlp" + std::to_string(li), x));
  }
  return x;
}

Var Encoder::embed_action_reward(ParameterBinding& p, std::span<const std::size_t> prev_actions,
                                 std::span<const double> prev_rewards) const {
  if (prev_actions.size() != prev_rewards.size()) throw InputError("encoder: action/reward length mismatch");
  Tensor features({prev_actions.size(), num_actions_ + 1});
  for (std::size_t i = 0; i < prev_actions.size(); ++i) {
    if (prev_actions[i] >= num_actions_)
      throw InputError("encoder: action id " + std::to_string(prev_actions[i]) + " out of range [0, " +
                       std::to_string(num_actions_) + ")");
    features(i, prev_actions[i]) = 1.0;
    features(i, num_actions_) = prev_rewards[i];
  }
  return linear(p, "encoder/action_reward", p.tape().constant(std::move(features)));
}

Var Encoder::build_input_embedding(ParameterBinding& p, const Tensor& observations,
                                   std::span<const std::size_t> prev_actions,
                                   std::span<const double> prev_rewards) const {
  if (observations.rows() != prev_actions.size()) throw InputError("encoder: observation/action count mismatch");
  const Var parts[] = {encode_observations(p, observations), embed_action_reward(p, prev_actions, prev_rewards)};
  return numerics::concat_cols(parts);
}

Tensor Encoder::encode_observation(const ParameterSet& params, const Tensor& observation) const {
  if (observation.size() != obs_shape_.size() ||
      (observation.rank() == 3 && !(observation.shape() == numerics::Shape{obs_shape_.height, obs_shape_.width,
                                                                           obs_shape_.channels})))
    throw ConfigError("encoder: observation shape " + numerics::shape_string(observation.shape()) + " does not match config");
  numerics::Tape tape(false);
  ParameterBinding p(tape, params, false);
  return encode_observations(p, observation.reshaped({1, obs_shape_.size()})).value();
}

Tensor Encoder::embed_action_reward(const ParameterSet& params, std::size_t prev_action, double prev_reward) const {
  numerics::Tape tape(false);
  ParameterBinding p(tape, params, false);
  const std::size_t a[] = {prev_action};
  const double r[] = {prev_reward};
  return embed_action_reward(p, a, r).value();
}

Tensor Encoder::build_input_embedding(const ParameterSet& params, const Tensor& observation, std::size_t prev_action,
                                      double prev_reward) const {
  numerics::Tape tape(false);
  ParameterBinding p(tape, params, false);
  const std::size_t a[] = {prev_action};
  const double r[] = {prev_reward};
  if (observation.size() != obs_shape_.size()) throw ConfigError("encoder: observation shape mismatch");
  return build_input_embedding(p, observation.reshaped({1, obs_shape_.size()}), a, r).value();
}

}  // namespace coberl::encoder

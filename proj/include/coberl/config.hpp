#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace coberl {

enum class EncoderPreset { kFlat, kDesk, kPaper };
enum class Activation { kRelu, kGelu };
enum class GateMode { kGated, kNone };
enum class MaskTokenMode { kTrainable, kZero };
enum class TransformKind { kSignedSqrt, kIdentity };
enum class TargetPolicy { kMax, kEpsGreedy };
enum class RunMode { kSingleThreaded, kThreaded };

struct ResidualGroup {
  std::size_t blocks = 2;
  std::size_t inner_channels = 8;
  std::size_t outer_channels = 16;
};

struct EncoderConfig {
  EncoderPreset preset = EncoderPreset::kDesk;
  std::size_t action_reward_size = 16;
  /// Channels per group-norm group.
  std::size_t group_size = 8;

  // Residual stack; filled from the preset by apply_encoder_preset().
  std::size_t stem_channels = 16;
  std::size_t stem_stride = 1;
  std::vector<ResidualGroup> groups = {ResidualGroup{}};
  std::vector<std::size_t> mlp_sizes = {64, 48};
};

struct TransformerConfig {
  std::size_t num_layers = 2;
  std::size_t memory_size = 8;
  std::size_t d_model = 64;
  std::size_t num_heads = 2;
  std::size_t head_size = 32;
  std::size_t mlp_size = 128;
  Activation activation = Activation::kGelu;
  double gate_bias = 2.0;
};

struct CoreConfig {
  std::size_t lstm_size = 64;
  std::size_t head_hidden = 64;
  GateMode gate = GateMode::kGated;
  double forget_bias = 1.0;
};

struct ContrastiveConfig {
  double mask_rate = 0.15;
  double loss_weight = 1.0;
  double kl_weight = 1.0;
  MaskTokenMode mask_token = MaskTokenMode::kTrainable;
  std::size_t critic_size = 32;
};

struct RlConfig {
  TransformKind value_transform = TransformKind::kSignedSqrt;
  double transform_epsilon = 1e-3;
  double discount = 0.997;
  double lambda = 0.8;
  TargetPolicy target_policy = TargetPolicy::kMax;
  double target_epsilon = 0.01;
  double priority_eta = 0.9;
};

struct OptimizerConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
  double clip_norm = 40.0;
};

struct ReplayConfig {
  std::size_t capacity = 512;
  std::size_t trace_length = 16;
  std::size_t replay_period = 8;
  /// Negative means "same as replay_period".
  long burn_in = -1;
  std::size_t min_sequences = 32;
  std::size_t batch_size = 16;
  double importance_exponent = 0.6;
  double sampling_exponent = 1.0;

  std::size_t effective_burn_in() const {
    return burn_in < 0 ? replay_period : static_cast<std::size_t>(burn_in);
  }
};

struct ActorConfig {
  std::size_t num_actors = 4;
  double base_epsilon = 0.4;
  double alpha = 7.0;
};

struct LearnerConfig {
  std::size_t target_update_period = 400;
  std::size_t publish_interval = 10;
  /// Environment steps (summed over actors) between learner steps.
  std::size_t env_steps_per_update = 32;
  std::size_t max_consecutive_aborts = 3;
  bool rl_pass_masked = true;
};

struct EvaluatorConfig {
  double epsilon = 0.01;
  std::size_t episodes = 5;
  std::size_t interval = 5000;
};

struct EnvConfig {
  std::string id = "cue_recall";
  std::size_t horizon = 12;
  std::size_t num_cues = 4;
  double noise = 0.5;
  std::vector<double> payouts = {0.0, 1.0};
};

struct RunSettings {
  RunMode mode = RunMode::kSingleThreaded;
  std::size_t total_env_steps = 200000;
  std::uint64_t seed = 0;
  /// Threaded mode: minimum requests per inference batch.
  std::size_t inference_batch = 4;
};

/// Complete run configuration. Every hyperparameter-table row has a key.
struct Config {
  EncoderConfig encoder;
  TransformerConfig transformer;
  CoreConfig core;
  ContrastiveConfig contrastive;
  RlConfig rl;
  OptimizerConfig optimizer;
  ReplayConfig replay;
  ActorConfig actors;
  LearnerConfig learner;
  EvaluatorConfig evaluator;
  EnvConfig env;
  RunSettings run;

  /// Throws ConfigError on cross-field inconsistencies.
  void validate() const;
};

/// Desk-scale defaults with the full-size architecture and replay settings.
Config paper_preset();

/// Refreshes the residual-stack fields of `encoder` from its preset.
void apply_encoder_preset(EncoderConfig& encoder);

/// Applies `key=value` overrides. Unknown keys and bad values throw ConfigError.
void apply_overrides(Config& config, const std::map<std::string, std::string>& values);

/// Parses flat `key = value` text; `#` starts a comment. `preset = paper` is
/// honoured first when present.
Config parse_config(const std::string& text);
Config load_config(const std::filesystem::path& path);

/// Round-trippable text form of every key.
std::string to_text(const Config& config);

std::vector<std::string> config_keys();

}  // namespace coberl

#include "coberl/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "coberl/error.hpp"

namespace coberl {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  }
}

std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  return out;
}

long to_long(const std::string& key, const std::string& v) {
  long out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

template <typename E>
E to_enum(const std::string& key, const std::string& v, std::initializer_list<std::pair<const char*, E>> options) {
  for (const auto& [name, value] : options)
    if (v == name) return value;
  std::string allowed;
  for (const auto& [name, _] : options) allowed += std::string(allowed.empty() ? "" : "|") + name;
  throw ConfigError("config key '" + key + "': expected one of {" + allowed + "}, got '" + v + "'");
}

template <typename E>
std::string enum_name(E value, std::initializer_list<std::pair<const char*, E>> options) {
  for (const auto& [name, v] : options)
    if (v == value) return name;
  return "?";
}

std::string fmt(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

const std::initializer_list<std::pair<const char*, EncoderPreset>> kPresets = {
    {"flat", EncoderPreset::kFlat}, {"desk", EncoderPreset::kDesk}, {"paper", EncoderPreset::kPaper}};
const std::initializer_list<std::pair<const char*, Activation>> kActivations = {{"relu", Activation::kRelu},
                                                                                {"gelu", Activation::kGelu}};
const std::initializer_list<std::pair<const char*, GateMode>> kGates = {{"gated", GateMode::kGated},
                                                                        {"none", GateMode::kNone}};
const std::initializer_list<std::pair<const char*, MaskTokenMode>> kMaskTokens = {
    {"trainable", MaskTokenMode::kTrainable}, {"zero", MaskTokenMode::kZero}};
const std::initializer_list<std::pair<const char*, TransformKind>> kTransforms = {
    {"signed_sqrt", TransformKind::kSignedSqrt}, {"identity", TransformKind::kIdentity}};
const std::initializer_list<std::pair<const char*, TargetPolicy>> kTargetPolicies = {
    {"max", TargetPolicy::kMax}, {"eps_greedy", TargetPolicy::kEpsGreedy}};
const std::initializer_list<std::pair<const char*, RunMode>> kModes = {{"single", RunMode::kSingleThreaded},
                                                                       {"threaded", RunMode::kThreaded}};

struct Field {
  std::function<void(Config&, const std::string& key, const std::string& value)> set;
  std::function<std::string(const Config&)> get;
};

#define SIZE_FIELD(key, member)                                                                         \
  {                                                                                                     \
    key, Field {                                                                                        \
      [](Config& c, const std::string& k, const std::string& v) { c.member = to_size(k, v); },          \
          [](const Config& c) { return std::to_string(c.member); }                                      \
    }                                                                                                   \
  }
#define REAL_FIELD(key, member)                                                                         \
  {                                                                                                     \
    key, Field {                                                                                        \
      [](Config& c, const std::string& k, const std::string& v) { c.member = to_double(k, v); },        \
          [](const Config& c) { return fmt(c.member); }                                                 \
    }                                                                                                   \
  }
#define ENUM_FIELD(key, member, table)                                                                  \
  {                                                                                                     \
    key, Field {                                                                                        \
      [](Config& c, const std::string& k, const std::string& v) { c.member = to_enum(k, v, table); },   \
          [](const Config& c) { return enum_name(c.member, table); }                                    \
    }                                                                                                   \
  }

const std::vector<std::pair<std::string, Field>>& registry() {
  static const std::vector<std::pair<std::string, Field>> fields = {
      // Optimizer.
      REAL_FIELD("optimizer.learning_rate", optimizer.learning_rate),
      REAL_FIELD("optimizer.adam_epsilon", optimizer.epsilon),
      REAL_FIELD("optimizer.adam_beta1", optimizer.beta1),
      REAL_FIELD("optimizer.adam_beta2", optimizer.beta2),
      REAL_FIELD("optimizer.clip_norm", optimizer.clip_norm),
      // RL loss.
      REAL_FIELD("rl.lambda", rl.lambda),
      REAL_FIELD("rl.discount", rl.discount),
      ENUM_FIELD("rl.value_transform", rl.value_transform, kTransforms),
      REAL_FIELD("rl.value_transform_epsilon", rl.transform_epsilon),
      ENUM_FIELD("rl.target_policy", rl.target_policy, kTargetPolicies),
      REAL_FIELD("rl.target_epsilon", rl.target_epsilon),
      // Replay.
      SIZE_FIELD("replay.batch_size", replay.batch_size),
      SIZE_FIELD("replay.trace_length", replay.trace_length),
      SIZE_FIELD("replay.replay_period", replay.replay_period),
      {"replay.burn_in",
       Field{[](Config& c, const std::string& k, const std::string& v) {
               c.replay.burn_in = v == "auto" ? -1 : to_long(k, v);
             },
             [](const Config& c) {
               return c.replay.burn_in < 0 ? std::string("auto") : std::to_string(c.replay.burn_in);
             }}},
      SIZE_FIELD("replay.capacity", replay.capacity),
      REAL_FIELD("replay.priority_exponent", rl.priority_eta),
      REAL_FIELD("replay.importance_sampling_exponent", replay.importance_exponent),
      REAL_FIELD("replay.sampling_exponent", replay.sampling_exponent),
      SIZE_FIELD("replay.min_sequences", replay.min_sequences),
      // Learner.
      SIZE_FIELD("learner.target_update_period", learner.target_update_period),
      SIZE_FIELD("learner.publish_interval", learner.publish_interval),
      SIZE_FIELD("learner.env_steps_per_update", learner.env_steps_per_update),
      SIZE_FIELD("learner.max_consecutive_aborts", learner.max_consecutive_aborts),
      {"harness.rl_pass_masked",
       Field{[](Config& c, const std::string& k, const std::string& v) { c.learner.rl_pass_masked = to_bool(k, v); },
             [](const Config& c) { return std::string(c.learner.rl_pass_masked ? "true" : "false"); }}},
      // Evaluator.
      REAL_FIELD("evaluator.epsilon", evaluator.epsilon),
      SIZE_FIELD("evaluator.episodes", evaluator.episodes),
      SIZE_FIELD("evaluator.interval", evaluator.interval),
      // Transformer.
      SIZE_FIELD("transformer.num_layers", transformer.num_layers),
      SIZE_FIELD("transformer.memory_size", transformer.memory_size),
      SIZE_FIELD("transformer.d_model", transformer.d_model),
      SIZE_FIELD("transformer.num_heads", transformer.num_heads),
      SIZE_FIELD("transformer.head_size", transformer.head_size),
      SIZE_FIELD("transformer.mlp_size", transformer.mlp_size),
      ENUM_FIELD("transformer.activation", transformer.activation, kActivations),
      REAL_FIELD("transformer.gate_bias", transformer.gate_bias),
      // Encoder.
      {"encoder.preset",
       Field{[](Config& c, const std::string& k, const std::string& v) {
               c.encoder.preset = to_enum(k, v, kPresets);
               apply_encoder_preset(c.encoder);
             },
             [](const Config& c) { return enum_name(c.encoder.preset, kPresets); }}},
      SIZE_FIELD("encoder.action_reward_size", encoder.action_reward_size),
      {"encoder.mlp_sizes",
       Field{[](Config& c, const std::string& k, const std::string& v) {
               c.encoder.mlp_sizes.clear();
               std::stringstream ss(v);
               std::string item;
               while (std::getline(ss, item, ',')) c.encoder.mlp_sizes.push_back(to_size(k, trim(item)));
             },
             [](const Config& c) {
               std::string out;
               for (auto n : c.encoder.mlp_sizes) out += (out.empty() ? "" : ",") + std::to_string(n);
               return out;
             }}},
      SIZE_FIELD("encoder.group_size", encoder.group_size),
      // Core head.
      SIZE_FIELD("core.lstm_size", core.lstm_size),
      SIZE_FIELD("core.head_hidden", core.head_hidden),
      ENUM_FIELD("core.gate", core.gate, kGates),
      REAL_FIELD("core.forget_bias", core.forget_bias),
      // Contrastive.
      REAL_FIELD("contrastive.loss_weight", contrastive.loss_weight),
      REAL_FIELD("contrastive.mask_rate", contrastive.mask_rate),
      REAL_FIELD("contrastive.kl_weight", contrastive.kl_weight),
      ENUM_FIELD("contrastive.mask_token", contrastive.mask_token, kMaskTokens),
      SIZE_FIELD("contrastive.critic_size", contrastive.critic_size),
      // Actors.
      SIZE_FIELD("actors.num_actors", actors.num_actors),
      REAL_FIELD("actors.base_epsilon", actors.base_epsilon),
      REAL_FIELD("actors.alpha", actors.alpha),
      // Run.
      ENUM_FIELD("harness.mode", run.mode, kModes),
      SIZE_FIELD("harness.total_env_steps", run.total_env_steps),
      SIZE_FIELD("harness.seed", run.seed),
      SIZE_FIELD("harness.inference_batch", run.inference_batch),
      // Environment.
      {"env.id", Field{[](Config& c, const std::string&, const std::string& v) { c.env.id = v; },
                       [](const Config& c) { return c.env.id; }}},
      SIZE_FIELD("env.horizon", env.horizon),
      SIZE_FIELD("env.num_cues", env.num_cues),
      REAL_FIELD("env.noise", env.noise),
      {"env.payouts",
       Field{[](Config& c, const std::string& k, const std::string& v) {
               c.env.payouts.clear();
               std::stringstream ss(v);
               std::string item;
               while (std::getline(ss, item, ',')) c.env.payouts.push_back(to_double(k, trim(item)));
             },
             [](const Config& c) {
               std::string out;
               for (double p : c.env.payouts) out += (out.empty() ? "" : ",") + fmt(p);
               return out;
             }}},
  };
  return fields;
}

#undef SIZE_FIELD
#undef REAL_FIELD
#undef ENUM_FIELD

}  // namespace

void apply_encoder_preset(EncoderConfig& e) {
  switch (e.preset) {
    case EncoderPreset::kFlat:
      e.groups.clear();
      e.mlp_sizes.clear();
      break;
    case EncoderPreset::kDesk:
      e.stem_channels = 16;
      e.stem_stride = 1;
      e.groups = {ResidualGroup{2, 8, 16}};
      e.mlp_sizes = {64, 48};
      break;
    case EncoderPreset::kPaper:
      e.stem_channels = 64;
      e.stem_stride = 2;
      e.groups = {ResidualGroup{2, 16, 64}, ResidualGroup{4, 32, 128}, ResidualGroup{6, 64, 256},
                  ResidualGroup{2, 128, 512}};
      e.mlp_sizes = {512, 448};
      break;
  }
}

Config paper_preset() {
  Config c;
  c.encoder.preset = EncoderPreset::kPaper;
  apply_encoder_preset(c.encoder);
  c.encoder.action_reward_size = 64;
  c.transformer = TransformerConfig{8, 64, 512, 8, 64, 512, Activation::kGelu, 2.0};
  c.core.lstm_size = 512;
  c.core.head_hidden = 512;
  c.contrastive.critic_size = 512;
  c.replay.capacity = 80000;
  c.replay.trace_length = 80;
  c.replay.replay_period = 40;
  c.replay.min_sequences = 5000;
  c.replay.batch_size = 32;
  c.actors.num_actors = 512;
  c.run.inference_batch = 64;
  return c;
}

void Config::validate() const {
  if (transformer.d_model == 0) throw ConfigError("transformer.d_model must be positive");
  if (transformer.num_heads == 0 || transformer.head_size == 0)
    throw ConfigError("transformer.num_heads and transformer.head_size must be positive");
  if (encoder.action_reward_size >= transformer.d_model)
    throw ConfigError("encoder.action_reward_size must be smaller than transformer.d_model");
  if (encoder.preset != EncoderPreset::kFlat &&
      (encoder.mlp_sizes.empty() || encoder.mlp_sizes.back() != transformer.d_model - encoder.action_reward_size))
    throw ConfigError("encoder MLP output must equal d_model - action_reward_size (" +
                      std::to_string(transformer.d_model - encoder.action_reward_size) + ")");
  if (!(contrastive.mask_rate > 0.0 && contrastive.mask_rate <= 1.0))
    throw ConfigError("contrastive.mask_rate must lie in (0, 1]");
  if (replay.trace_length == 0 || replay.replay_period == 0) throw ConfigError("trace length and replay period must be >= 1");
  if (replay.effective_burn_in() >= replay.trace_length) throw ConfigError("replay.burn_in must be < trace_length");
  if (replay.batch_size == 0) throw ConfigError("replay.batch_size must be >= 1");
  if (replay.capacity == 0) throw ConfigError("replay.capacity must be >= 1");
  if (actors.num_actors == 0) throw ConfigError("actors.num_actors must be >= 1");
  if (learner.target_update_period == 0 || learner.publish_interval == 0 || learner.env_steps_per_update == 0)
    throw ConfigError("learner periods must be >= 1");
  if (rl.lambda < 0.0 || rl.lambda > 1.0 || rl.discount < 0.0 || rl.discount > 1.0)
    throw ConfigError("rl.lambda and rl.discount must lie in [0, 1]");
  if (rl.value_transform == TransformKind::kSignedSqrt && !(rl.transform_epsilon > 0.0))
    throw ConfigError("rl.value_transform_epsilon must be positive");
  if (evaluator.episodes == 0 || evaluator.interval == 0) throw ConfigError("evaluator episodes/interval must be >= 1");
}

void apply_overrides(Config& config, const std::map<std::string, std::string>& values) {
  const auto& fields = registry();
  // The encoder preset resets derived fields, so it goes first.
  if (auto it = values.find("encoder.preset"); it != values.end()) {
    for (const auto& [key, field] : fields)
      if (key == "encoder.preset") field.set(config, key, it->second);
  }
  for (const auto& [key, value] : values) {
    if (key == "encoder.preset" || key == "preset") continue;
    bool found = false;
    for (const auto& [k, field] : fields) {
      if (k == key) {
        field.set(config, key, value);
        found = true;
        break;
      }
    }
    if (!found) throw ConfigError("unknown config key '" + key + "'");
  }
}

Config parse_config(const std::string& text) {
  std::map<std::string, std::string> values;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (!values.emplace(key, value).second)
      throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
  }
  Config config;
  if (auto it = values.find("preset"); it != values.end()) {
    if (it->second == "paper") {
      config = paper_preset();
    } else if (it->second != "desk") {
      throw ConfigError("config key 'preset': expected desk|paper, got '" + it->second + "'");
    }
  }
  apply_overrides(config, values);
  config.validate();
  return config;
}

Config load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string to_text(const Config& config) {
  std::string out;
  for (const auto& [key, field] : registry()) out += key + " = " + field.get(config) + "\n";
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [key, _] : registry()) keys.push_back(key);
  return keys;
}

}  // namespace coberl

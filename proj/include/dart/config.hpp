#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "dart/tensor.hpp"

namespace dart {

// Every knob in one flat struct. Defaults are the desk profile; the paper
// profile swaps in the published scale. Config files are `key = value`
// lines with `#` comments and dotted keys; unknown keys are rejected.
struct Config {
  std::uint64_t run_seed = 1;
  std::string run_out_dir = "runs/out";

  std::string env_name = "gridcatch";
  std::int64_t env_budget_steps = 100000;

  std::int64_t store_capacity = 100000;

  int tok_codebook_size = 128;
  int tok_embed_dim = 8;
  int tok_tokens_per_image = 16;
  int tok_base_channels = 16;
  int tok_res_blocks = 1;
  bool tok_self_attention = false;
  int tok_batch = 8;
  double tok_beta = 0.25;
  double tok_feat_weight = 8.0;
  double tok_codebook_lr_scale = 0.1;
  double tok_decoder_lr_scale = 4.0;
  int tok_lr_warmup = 400;
  double tok_lr = 1e-3;

  int wm_embed_dim = 64;
  int wm_layers = 4;
  int wm_heads = 4;
  int wm_context_steps = 10;
  int wm_horizon = 20;
  double wm_dropout_embed = 0.0;
  double wm_dropout_attn = 0.0;
  double wm_dropout_resid = 0.0;
  double wm_weight_decay = 0.0;
  double wm_lr = 1e-3;
  int wm_batch = 4;

  int pol_embed_dim = 64;
  int pol_layers = 3;
  int pol_heads = 4;
  double pol_dropout = 0.0;
  double pol_gamma = 0.995;
  double pol_lambda = 0.95;
  double pol_entropy_coef = 0.001;
  double pol_epsilon = 0.01;
  double pol_temperature_train = 1.0;
  double pol_temperature_eval = 0.5;
  double pol_lr = 3e-4;
  double pol_weight_decay = 0.0;

  int train_epochs = 60;
  int train_collect_steps = 200;
  int train_updates_tokenizer = 30;
  int train_updates_worldmodel = 30;
  int train_updates_policy = 30;
  int train_eval_episodes = 20;
  int train_eval_every = 1;
  bool train_imagine_from_episode_start = true;
  double train_grad_clip = 1.0;
};

inline Config desk_profile() { return Config{}; }

inline Config paper_profile() {
  Config c;
  c.tok_codebook_size = 512;
  c.tok_embed_dim = 512;
  c.tok_base_channels = 64;
  c.tok_res_blocks = 2;
  c.tok_self_attention = true;
  c.tok_batch = 64;
  c.tok_lr = 1e-4;
  c.wm_embed_dim = 256;
  c.wm_layers = 10;
  c.wm_heads = 4;
  c.wm_context_steps = 20;
  c.wm_dropout_embed = 0.1;
  c.wm_dropout_attn = 0.1;
  c.wm_dropout_resid = 0.1;
  c.wm_weight_decay = 0.01;
  c.wm_lr = 1e-4;
  c.wm_batch = 64;
  c.pol_embed_dim = 512;
  c.pol_layers = 6;
  c.pol_heads = 8;
  c.pol_dropout = 0.2;
  c.pol_lr = 1e-4;
  return c;
}

namespace configdetail {

struct Field {
  std::string key;
  std::function<void(Config&, const std::string&)> set;
  std::function<std::string(const Config&)> get;
};

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

template <typename T>
T parse_value(const std::string& key, const std::string& raw);

template <>
inline std::int64_t parse_value<std::int64_t>(const std::string& key, const std::string& raw) {
  std::size_t pos = 0;
  std::int64_t v = 0;
  try {
    v = std::stoll(raw, &pos);
  } catch (...) {
    throw ConfigError(key + ": expected integer, got '" + raw + "'");
  }
  if (pos != raw.size()) throw ConfigError(key + ": expected integer, got '" + raw + "'");
  return v;
}

template <>
inline int parse_value<int>(const std::string& key, const std::string& raw) {
  return static_cast<int>(parse_value<std::int64_t>(key, raw));
}

template <>
inline std::uint64_t parse_value<std::uint64_t>(const std::string& key, const std::string& raw) {
  std::size_t pos = 0;
  std::uint64_t v = 0;
  try {
    v = std::stoull(raw, &pos);
  } catch (...) {
    throw ConfigError(key + ": expected unsigned integer, got '" + raw + "'");
  }
  if (pos != raw.size()) throw ConfigError(key + ": expected unsigned integer, got '" + raw + "'");
  return v;
}

template <>
inline double parse_value<double>(const std::string& key, const std::string& raw) {
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(raw, &pos);
  } catch (...) {
    throw ConfigError(key + ": expected number, got '" + raw + "'");
  }
  if (pos != raw.size()) throw ConfigError(key + ": expected number, got '" + raw + "'");
  return v;
}

template <>
inline bool parse_value<bool>(const std::string& key, const std::string& raw) {
  if (raw == "true" || raw == "1") return true;
  if (raw == "false" || raw == "0") return false;
  throw ConfigError(key + ": expected true/false, got '" + raw + "'");
}

template <>
inline std::string parse_value<std::string>(const std::string&, const std::string& raw) {
  return raw;
}

template <typename T>
std::string to_str(const T& v) {
  if constexpr (std::is_same_v<T, std::string>) {
    return v;
  } else if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_floating_point_v<T>) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  } else {
    return std::to_string(v);
  }
}

inline const std::vector<Field>& registry() {
  static const std::vector<Field> fields = [] {
    std::vector<Field> f;
    auto reg = [&f](const std::string& key, auto member) {
      using T = std::decay_t<decltype(std::declval<Config>().*member)>;
      f.push_back(Field{key,
                        [member, key](Config& c, const std::string& raw) { c.*member = parse_value<T>(key, raw); },
                        [member](const Config& c) { return to_str(c.*member); }});
    };
    reg("run.seed", &Config::run_seed);
    reg("run.out_dir", &Config::run_out_dir);
    reg("env.name", &Config::env_name);
    reg("env.budget_steps", &Config::env_budget_steps);
    reg("store.capacity", &Config::store_capacity);
    reg("tokenizer.codebook_size", &Config::tok_codebook_size);
    reg("tokenizer.embed_dim", &Config::tok_embed_dim);
    reg("tokenizer.tokens_per_image", &Config::tok_tokens_per_image);
    reg("tokenizer.base_channels", &Config::tok_base_channels);
    reg("tokenizer.res_blocks", &Config::tok_res_blocks);
    reg("tokenizer.self_attention", &Config::tok_self_attention);
    reg("tokenizer.batch", &Config::tok_batch);
    reg("tokenizer.beta", &Config::tok_beta);
    reg("tokenizer.feat_weight", &Config::tok_feat_weight);
    reg("tokenizer.codebook_lr_scale", &Config::tok_codebook_lr_scale);
    reg("tokenizer.decoder_lr_scale", &Config::tok_decoder_lr_scale);
    reg("tokenizer.lr_warmup", &Config::tok_lr_warmup);
    reg("tokenizer.lr", &Config::tok_lr);
    reg("worldmodel.embed_dim", &Config::wm_embed_dim);
    reg("worldmodel.layers", &Config::wm_layers);
    reg("worldmodel.heads", &Config::wm_heads);
    reg("worldmodel.context_steps", &Config::wm_context_steps);
    reg("worldmodel.horizon", &Config::wm_horizon);
    reg("worldmodel.dropout_embed", &Config::wm_dropout_embed);
    reg("worldmodel.dropout_attn", &Config::wm_dropout_attn);
    reg("worldmodel.dropout_resid", &Config::wm_dropout_resid);
    reg("worldmodel.weight_decay", &Config::wm_weight_decay);
    reg("worldmodel.lr", &Config::wm_lr);
    reg("worldmodel.batch", &Config::wm_batch);
    reg("policy.embed_dim", &Config::pol_embed_dim);
    reg("policy.layers", &Config::pol_layers);
    reg("policy.heads", &Config::pol_heads);
    reg("policy.dropout", &Config::pol_dropout);
    reg("policy.gamma", &Config::pol_gamma);
    reg("policy.lambda", &Config::pol_lambda);
    reg("policy.entropy_coef", &Config::pol_entropy_coef);
    reg("policy.epsilon", &Config::pol_epsilon);
    reg("policy.temperature_train", &Config::pol_temperature_train);
    reg("policy.temperature_eval", &Config::pol_temperature_eval);
    reg("policy.lr", &Config::pol_lr);
    reg("policy.weight_decay", &Config::pol_weight_decay);
    reg("train.epochs", &Config::train_epochs);
    reg("train.collect_steps", &Config::train_collect_steps);
    reg("train.updates_tokenizer", &Config::train_updates_tokenizer);
    reg("train.updates_worldmodel", &Config::train_updates_worldmodel);
    reg("train.updates_policy", &Config::train_updates_policy);
    reg("train.eval_episodes", &Config::train_eval_episodes);
    reg("train.eval_every", &Config::train_eval_every);
    reg("train.imagine_from_episode_start", &Config::train_imagine_from_episode_start);
    reg("train.grad_clip", &Config::train_grad_clip);
    return f;
  }();
  return fields;
}

}  // namespace configdetail

inline void config_set(Config& c, const std::string& key, const std::string& value) {
  for (const auto& f : configdetail::registry()) {
    if (f.key == key) {
      f.set(c, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline void config_apply_text(Config& c, const std::string& text, const std::string& origin = "<text>") {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = configdetail::trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
    const std::string key = configdetail::trim(line.substr(0, eq));
    const std::string value = configdetail::trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
    config_set(c, key, value);
  }
}

inline void config_apply_file(Config& c, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  config_apply_text(c, ss.str(), path);
}

inline std::string config_dump(const Config& c) {
  std::ostringstream os;
  for (const auto& f : configdetail::registry()) os << f.key << " = " << f.get(c) << "\n";
  return os.str();
}

inline Config config_from_profile(const std::string& profile) {
  if (profile == "desk") return desk_profile();
  if (profile == "paper") return paper_profile();
  throw ConfigError("unknown profile '" + profile + "' (expected desk|paper)");
}

inline void validate(const Config& c) {
  if (c.tok_tokens_per_image != 16) throw ConfigError("tokenizer.tokens_per_image: only 16 (4x4 grid) is supported");
  if (c.tok_codebook_size < 1) throw ConfigError("tokenizer.codebook_size must be >= 1");
  if (c.tok_feat_weight < 0.0) throw ConfigError("tokenizer.feat_weight must be >= 0");
  if (c.tok_lr_warmup < 0) throw ConfigError("tokenizer.lr_warmup must be >= 0");
  if (c.pol_gamma < 0.0 || c.pol_gamma > 1.0) throw ConfigError("policy.gamma must be in [0,1]");
  if (c.pol_lambda < 0.0 || c.pol_lambda > 1.0) throw ConfigError("policy.lambda must be in [0,1]");
  if (c.pol_epsilon < 0.0 || c.pol_epsilon > 1.0) throw ConfigError("policy.epsilon must be in [0,1]");
  if (c.wm_context_steps < 1) throw ConfigError("worldmodel.context_steps must be >= 1");
  if (c.wm_horizon < 1) throw ConfigError("worldmodel.horizon must be >= 1");
  if (c.env_budget_steps < 1) throw ConfigError("env.budget_steps must be >= 1");
}

}  // namespace dart

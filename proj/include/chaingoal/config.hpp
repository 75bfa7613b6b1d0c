#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "chaingoal/common.hpp"
#include "chaingoal/maze.hpp"
#include "chaingoal/mixer.hpp"
#include "chaingoal/policy.hpp"
#include "chaingoal/trainer.hpp"

namespace chaingoal {

// A run is fully described by one JSON document: maze, dataset reference,
// model dimensions, hierarchy settings, optimizer schedule, loss weights and
// decoder options. Unknown keys are rejected so typos cannot silently fall
// back to defaults.
struct RunConfig {
  std::string maze_name = "corridor";
  std::string maze_file;  // inline maze JSON file; overrides maze_name when set
  std::string data_path = "data/corridor.bin";
  std::string out_dir = "runs/latest";
  TrainConfig trainer;
};

inline nlohmann::json to_json(const RunConfig& c) {
  const TrainConfig& t = c.trainer;
  nlohmann::json j;
  j["maze"] = {{"name", c.maze_name}, {"file", c.maze_file}};
  j["data"] = {{"path", c.data_path}};
  j["out_dir"] = c.out_dir;
  j["model"] = {{"embed_dim", t.embed_dim},
                {"encoder_hidden", t.encoder_hidden},
                {"head_hidden", t.head_hidden},
                {"value_hidden", t.value_hidden},
                {"token_mixer_hidden", t.token_mixer_hidden},
                {"channel_mixer_hidden", t.channel_mixer_hidden},
                {"n_blocks", t.n_blocks}};
  j["hierarchy"] = {{"horizon", t.horizon},
                    {"k", t.k},
                    {"teacher_forcing", t.teacher_forcing},
                    {"generation_order", to_string(t.generation_order)},
                    {"causal_mixer_mode", to_string(t.causal_mode)}};
  j["trainer"] = {{"n_steps", t.n_steps},
                  {"batch_size", t.batch_size},
                  {"lr", t.lr},
                  {"gamma", t.gamma},
                  {"tau", t.tau},
                  {"target_sync_rate", t.target_sync_rate},
                  {"value_warmup_steps", t.value_warmup_steps},
                  {"log_interval", t.log_interval},
                  {"eval_interval", t.eval_interval},
                  {"checkpoint_interval", t.checkpoint_interval},
                  {"seed", t.seed}};
  j["weights"] = {{"lambda_h", t.weights.lambda_h},
                  {"lambda_l", t.weights.lambda_l},
                  {"gamma_h", t.weights.gamma_h},
                  {"beta", t.weights.beta},
                  {"weight_clip", t.weights.weight_clip}};
  j["goal_sample"] = {{"p_current", t.goal_sample.p_current},
                      {"p_future", t.goal_sample.p_future},
                      {"p_random", t.goal_sample.p_random}};
  j["eval"] = {{"episodes_per_pair", t.eval_episodes_per_pair}};
  j["decoder"] = {{"enabled", t.decoder_enabled},
                  {"weight", t.decoder_weight},
                  {"hidden", t.decoder_hidden}};
  return j;
}

namespace detail {

inline std::string join_keys(const nlohmann::json& obj) {
  std::string out;
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!out.empty()) out += ", ";
    out += it.key();
  }
  return out;
}

// Every key in `user` must exist in `base` (recursively for objects); the
// defaults document doubles as the schema.
inline void check_keys(const nlohmann::json& base, const nlohmann::json& user,
                       const std::string& path) {
  if (!user.is_object()) {
    if (base.is_object())
      throw ConfigError("config: section '" + path + "' must be an object");
    return;
  }
  if (!base.is_object())
    throw ConfigError("config: '" + path + "' does not take nested keys");
  for (auto it = user.begin(); it != user.end(); ++it) {
    std::string here = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key()))
      throw ConfigError("config: unknown key '" + here + "'; valid keys" +
                        (path.empty() ? "" : " in '" + path + "'") + ": " + join_keys(base));
    if (base[it.key()].is_object()) check_keys(base[it.key()], *it, here);
  }
}

inline void merge_into(nlohmann::json& base, const nlohmann::json& user) {
  for (auto it = user.begin(); it != user.end(); ++it) {
    if (base[it.key()].is_object() && it->is_object())
      merge_into(base[it.key()], *it);
    else
      base[it.key()] = *it;
  }
}

template <typename T>
T get_as(const nlohmann::json& j, const std::string& key) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: bad value for '" + key + "': " + e.what());
  }
}

}  // namespace detail

inline GenerationOrder parse_generation_order(const std::string& s) {
  if (s == "reverse") return GenerationOrder::kReverse;
  if (s == "forward") return GenerationOrder::kForward;
  throw ConfigError("config: generation_order must be 'reverse' or 'forward', got '" + s + "'");
}

inline CausalMixerMode parse_causal_mode(const std::string& s) {
  if (s == "learnable") return CausalMixerMode::kLearnable;
  if (s == "fixed_average") return CausalMixerMode::kFixedAverage;
  if (s == "none") return CausalMixerMode::kNone;
  throw ConfigError(
      "config: causal_mixer_mode must be 'learnable', 'fixed_average' or 'none', got '" + s +
      "'");
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  using detail::get_as;
  RunConfig c;
  detail::check_keys(to_json(RunConfig{}), j, "");
  nlohmann::json full = to_json(RunConfig{});
  detail::merge_into(full, j);

  c.maze_name = get_as<std::string>(full["maze"], "name");
  c.maze_file = get_as<std::string>(full["maze"], "file");
  c.data_path = get_as<std::string>(full["data"], "path");
  c.out_dir = full["out_dir"].get<std::string>();

  TrainConfig& t = c.trainer;
  const auto& model = full["model"];
  t.embed_dim = get_as<std::size_t>(model, "embed_dim");
  t.encoder_hidden = get_as<std::vector<std::size_t>>(model, "encoder_hidden");
  t.head_hidden = get_as<std::vector<std::size_t>>(model, "head_hidden");
  t.value_hidden = get_as<std::vector<std::size_t>>(model, "value_hidden");
  t.token_mixer_hidden = get_as<std::vector<std::size_t>>(model, "token_mixer_hidden");
  t.channel_mixer_hidden = get_as<std::vector<std::size_t>>(model, "channel_mixer_hidden");
  t.n_blocks = get_as<std::size_t>(model, "n_blocks");

  const auto& hier = full["hierarchy"];
  t.horizon = get_as<std::size_t>(hier, "horizon");
  t.k = get_as<std::size_t>(hier, "k");
  t.teacher_forcing = get_as<bool>(hier, "teacher_forcing");
  t.generation_order = parse_generation_order(get_as<std::string>(hier, "generation_order"));
  t.causal_mode = parse_causal_mode(get_as<std::string>(hier, "causal_mixer_mode"));

  const auto& tr = full["trainer"];
  t.n_steps = get_as<std::size_t>(tr, "n_steps");
  t.batch_size = get_as<std::size_t>(tr, "batch_size");
  t.lr = get_as<double>(tr, "lr");
  t.gamma = get_as<double>(tr, "gamma");
  t.tau = get_as<double>(tr, "tau");
  t.target_sync_rate = get_as<double>(tr, "target_sync_rate");
  t.value_warmup_steps = get_as<std::size_t>(tr, "value_warmup_steps");
  t.log_interval = get_as<std::size_t>(tr, "log_interval");
  t.eval_interval = get_as<std::size_t>(tr, "eval_interval");
  t.checkpoint_interval = get_as<std::size_t>(tr, "checkpoint_interval");
  t.seed = get_as<std::uint64_t>(tr, "seed");

  const auto& w = full["weights"];
  t.weights.lambda_h = get_as<double>(w, "lambda_h");
  t.weights.lambda_l = get_as<double>(w, "lambda_l");
  t.weights.gamma_h = get_as<double>(w, "gamma_h");
  t.weights.beta = get_as<double>(w, "beta");
  t.weights.weight_clip = get_as<double>(w, "weight_clip");

  const auto& gs = full["goal_sample"];
  t.goal_sample.p_current = get_as<double>(gs, "p_current");
  t.goal_sample.p_future = get_as<double>(gs, "p_future");
  t.goal_sample.p_random = get_as<double>(gs, "p_random");

  t.eval_episodes_per_pair = get_as<std::size_t>(full["eval"], "episodes_per_pair");

  const auto& dec = full["decoder"];
  t.decoder_enabled = get_as<bool>(dec, "enabled");
  t.decoder_weight = get_as<double>(dec, "weight");
  t.decoder_hidden = get_as<std::vector<std::size_t>>(dec, "hidden");

  t.validate();
  return c;
}

// Named starting points: "desk" is the default-scale config; "full" restores
// the full-size value MLP.
inline RunConfig preset_config(const std::string& name) {
  if (name == "desk") return RunConfig{};
  if (name == "full") {
    RunConfig c;
    c.trainer.value_hidden = {512, 512, 512};
    return c;
  }
  throw ConfigError("config: unknown preset '" + name + "'; valid presets: desk, full");
}

inline RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("config: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("config: '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

// Applies one --set KEY=VALUE override onto a config document. The dotted
// path must name an existing key; the value is parsed as JSON when possible
// and taken as a string otherwise.
inline void apply_override(nlohmann::json& doc, const std::string& key,
                           const std::string& value) {
  std::vector<std::string> parts;
  std::stringstream ss(key);
  std::string part;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  if (parts.empty()) throw ConfigError("config: empty --set key");

  nlohmann::json schema = to_json(RunConfig{});
  nlohmann::json* s = &schema;
  nlohmann::json* target = &doc;
  std::string path;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    path = path.empty() ? parts[i] : path + "." + parts[i];
    if (!s->is_object() || !s->contains(parts[i]))
      throw ConfigError("config: unknown key '" + path + "'; valid keys" +
                        (i == 0 ? "" : " in '" + key.substr(0, path.rfind('.')) + "'") + ": " +
                        detail::join_keys(*s));
    s = &(*s)[parts[i]];
    if (i + 1 < parts.size()) {
      if (!target->contains(parts[i]) || !(*target)[parts[i]].is_object())
        (*target)[parts[i]] = nlohmann::json::object();
      target = &(*target)[parts[i]];
    } else {
      if (s->is_object())
        throw ConfigError("config: '" + path + "' is a section, not a value; keys: " +
                          detail::join_keys(*s));
      nlohmann::json parsed = nlohmann::json::parse(value, nullptr, false);
      (*target)[parts[i]] = parsed.is_discarded() ? nlohmann::json(value) : parsed;
    }
  }
}

inline MazeSpec load_maze(const RunConfig& c) {
  if (!c.maze_file.empty()) {
    std::ifstream in(c.maze_file);
    if (!in) throw DataError("maze: cannot open '" + c.maze_file + "'");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw DataError("maze: '" + c.maze_file + "' is not valid JSON: " + e.what());
    }
    return maze_from_json(j);
  }
  return builtin_maze(c.maze_name);
}

}  // namespace chaingoal

// Copyright 2026 The diffapo Authors
// SPDX-License-Identifier: Apache-2.0

#include "diffapo/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <initializer_list>
#include <sstream>

#include "json.hpp"

namespace diffapo {

using nlohmann::json;

namespace {

void check_keys(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : obj.items()) {
    bool known = false;
    for (const char* a : allowed) known = known || key == a;
    if (!known) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read(const json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  const json& v = obj.at(key);
  try {
    if constexpr (std::is_same_v<T, int>) {
      if (!v.is_number_integer()) throw ConfigError("");
      out = v.get<int>();
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) throw ConfigError("");
      out = v.get<std::uint64_t>();
    } else if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ConfigError("");
      out = v.get<double>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("");
      out = v.get<std::string>();
    } else if constexpr (std::is_same_v<T, std::vector<double>>) {
      if (!v.is_array()) throw ConfigError("");
      out.clear();
      for (const auto& e : v) {
        if (!e.is_number()) throw ConfigError("");
        out.push_back(e.get<double>());
      }
    }
  } catch (const ConfigError&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

void parse_sampler(const json& j, apo::SamplerConfig& s, const std::string& where) {
  check_keys(j, where, {"shift_set", "gamma", "high_threshold", "n_high", "n_low", "stride"});
  read(j, "shift_set", s.shift_set, where);
  read(j, "gamma", s.gamma, where);
  read(j, "high_threshold", s.high_threshold, where);
  read(j, "n_high", s.n_high, where);
  read(j, "n_low", s.n_low, where);
  read(j, "stride", s.stride, where);
}

apo::TimestepMode parse_mode(const std::string& s, const std::string& where) {
  if (s == "apo") return apo::TimestepMode::apo;
  if (s == "uniform") return apo::TimestepMode::uniform;
  throw ConfigError(where + ".timestep_mode: expected 'apo' or 'uniform'");
}

const char* mode_name(apo::TimestepMode m) { return m == apo::TimestepMode::apo ? "apo" : "uniform"; }

void parse_preference(const json& j, PreferenceStageConfig& st, const apo::SamplerConfig& base,
                      const std::string& where) {
  check_keys(j, where, {"steps", "beta", "lr", "timestep_mode", "sampler"});
  read(j, "steps", st.steps, where);
  read(j, "beta", st.beta, where);
  read(j, "lr", st.lr, where);
  if (j.contains("timestep_mode")) {
    std::string mode;
    read(j, "timestep_mode", mode, where);
    st.timestep_mode = parse_mode(mode, where);
  }
  if (j.contains("sampler")) {
    apo::SamplerConfig s = base;
    parse_sampler(j.at("sampler"), s, where + ".sampler");
    st.sampler = s;
  }
}

json sampler_json(const apo::SamplerConfig& s) {
  return json{{"shift_set", s.shift_set}, {"gamma", s.gamma},   {"high_threshold", s.high_threshold},
              {"n_high", s.n_high},       {"n_low", s.n_low},   {"stride", s.stride}};
}

json preference_json(const PreferenceStageConfig& st) {
  json j{{"steps", st.steps}, {"beta", st.beta}, {"lr", st.lr}, {"timestep_mode", mode_name(st.timestep_mode)}};
  if (st.sampler) j["sampler"] = sampler_json(*st.sampler);
  return j;
}

void check(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

bool positive_finite(double v) { return std::isfinite(v) && v > 0.0; }

void validate_preference(const PreferenceStageConfig& st, const std::string& name) {
  check(st.steps >= 0, name + ".steps must be >= 0");
  check(positive_finite(st.beta), name + ".beta must be finite and > 0");
  check(positive_finite(st.lr), name + ".lr must be finite and > 0");
}

}  // namespace

void RunConfig::validate() const {
  check(T >= 2, "T must be >= 2");
  check(!output_dir.empty(), "output_dir must be nonempty");
  task.validate();
  model.validate();
  check(model.num_conditions == task.num_modes, "model conditions must match task.num_modes");
  check(model.data_dim == 2, "the synthetic task is two-dimensional");
  sampler.validate();
  check(sampler.T == T, "sampler.T must equal T");
  oracle.validate();
  check(data.n_pos >= 0 && data.n_neg >= 0, "data counts must be >= 0");
  check(eval.n_eval >= 1, "eval.n_eval must be >= 1");
  check(eval.grid_steps >= 2, "eval.grid_steps must be >= 2");
  check(positive_finite(eval.deployment_shift), "eval.deployment_shift must be > 0");
  check(eval.every >= 1, "eval.every must be >= 1");
  eval.guidance.validate();
  check(pretrain.steps >= 0, "pretrain.steps must be >= 0");
  check(positive_finite(pretrain.lr), "pretrain.lr must be finite and > 0");
  check(pretrain.batch >= 1, "pretrain.batch must be >= 1");
  check(pretrain.null_prob >= 0.0 && pretrain.null_prob <= 1.0, "pretrain.null_prob must be in [0,1]");
  check(pretrain.log_every >= 1, "pretrain.log_every must be >= 1");
  validate_preference(online, "online");
  validate_preference(half_online, "half_online");
  validate_preference(offline, "offline");
  validate_preference(distill_aware, "distill_aware");
  for (const auto* st : {&online, &half_online, &offline, &distill_aware}) {
    if (st->sampler) {
      st->sampler->validate();
      check(st->sampler->T == T, "stage sampler T must equal T");
    }
  }
  check(distill.steps >= 0, "distill.steps must be >= 0");
  check(positive_finite(distill.lr), "distill.lr must be finite and > 0");
  check(distill.batch >= 1, "distill.batch must be >= 1");
  check(distill.log_every >= 1, "distill.log_every must be >= 1");
  distill.guidance.validate();
}

apo::SamplerConfig RunConfig::sampler_for(const PreferenceStageConfig& stage) const {
  return stage.sampler ? *stage.sampler : sampler;
}

RunConfig parse_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig cfg;
  check_keys(root, "config",
             {"seed", "T", "output_dir", "init_checkpoint", "task", "model", "sampler", "oracle", "data", "eval",
              "stages"});
  read(root, "seed", cfg.seed, "config");
  read(root, "T", cfg.T, "config");
  read(root, "output_dir", cfg.output_dir, "config");
  read(root, "init_checkpoint", cfg.init_checkpoint, "config");

  if (root.contains("task")) {
    const json& j = root.at("task");
    check_keys(j, "task", {"num_modes", "radius", "mode_std", "defect_radius"});
    read(j, "num_modes", cfg.task.num_modes, "task");
    read(j, "radius", cfg.task.radius, "task");
    read(j, "mode_std", cfg.task.mode_std, "task");
    read(j, "defect_radius", cfg.task.defect_radius, "task");
  }
  cfg.model.num_conditions = cfg.task.num_modes;
  if (root.contains("model")) {
    const json& j = root.at("model");
    check_keys(j, "model", {"time_dim", "cond_dim", "hidden", "hidden_layers", "skip_layer"});
    read(j, "time_dim", cfg.model.time_dim, "model");
    read(j, "cond_dim", cfg.model.cond_dim, "model");
    read(j, "hidden", cfg.model.hidden, "model");
    read(j, "hidden_layers", cfg.model.hidden_layers, "model");
    read(j, "skip_layer", cfg.model.skip_layer, "model");
  }
  if (root.contains("sampler")) parse_sampler(root.at("sampler"), cfg.sampler, "sampler");
  cfg.sampler.T = cfg.T;
  if (root.contains("oracle")) {
    const json& j = root.at("oracle");
    check_keys(j, "oracle", {"flip_prob"});
    read(j, "flip_prob", cfg.oracle.flip_prob, "oracle");
  }
  if (root.contains("data")) {
    const json& j = root.at("data");
    check_keys(j, "data", {"n_pos", "n_neg"});
    read(j, "n_pos", cfg.data.n_pos, "data");
    read(j, "n_neg", cfg.data.n_neg, "data");
  }
  if (root.contains("eval")) {
    const json& j = root.at("eval");
    check_keys(j, "eval", {"n_eval", "grid_steps", "deployment_shift", "omega", "lambda", "every"});
    read(j, "n_eval", cfg.eval.n_eval, "eval");
    read(j, "grid_steps", cfg.eval.grid_steps, "eval");
    read(j, "deployment_shift", cfg.eval.deployment_shift, "eval");
    read(j, "omega", cfg.eval.guidance.omega, "eval");
    read(j, "lambda", cfg.eval.guidance.lambda, "eval");
    read(j, "every", cfg.eval.every, "eval");
  }
  if (root.contains("stages")) {
    const json& stages = root.at("stages");
    check_keys(stages, "stages", {"pretrain", "online", "half_online", "offline", "distill", "distill_aware"});
    if (stages.contains("pretrain")) {
      const json& j = stages.at("pretrain");
      check_keys(j, "stages.pretrain", {"steps", "lr", "batch", "null_prob", "log_every"});
      read(j, "steps", cfg.pretrain.steps, "stages.pretrain");
      read(j, "lr", cfg.pretrain.lr, "stages.pretrain");
      read(j, "batch", cfg.pretrain.batch, "stages.pretrain");
      read(j, "null_prob", cfg.pretrain.null_prob, "stages.pretrain");
      read(j, "log_every", cfg.pretrain.log_every, "stages.pretrain");
    }
    auto pref = [&](const char* name, PreferenceStageConfig& st) {
      if (stages.contains(name)) parse_preference(stages.at(name), st, cfg.sampler, std::string("stages.") + name);
    };
    pref("online", cfg.online);
    pref("half_online", cfg.half_online);
    pref("offline", cfg.offline);
    pref("distill_aware", cfg.distill_aware);
    if (stages.contains("distill")) {
      const json& j = stages.at("distill");
      check_keys(j, "stages.distill", {"steps", "lr", "batch", "omega", "lambda", "log_every"});
      read(j, "steps", cfg.distill.steps, "stages.distill");
      read(j, "lr", cfg.distill.lr, "stages.distill");
      read(j, "batch", cfg.distill.batch, "stages.distill");
      read(j, "omega", cfg.distill.guidance.omega, "stages.distill");
      read(j, "lambda", cfg.distill.guidance.lambda, "stages.distill");
      read(j, "log_every", cfg.distill.log_every, "stages.distill");
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_json(const RunConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["T"] = cfg.T;
  j["output_dir"] = cfg.output_dir;
  j["init_checkpoint"] = cfg.init_checkpoint;
  j["task"] = {{"num_modes", cfg.task.num_modes},
               {"radius", cfg.task.radius},
               {"mode_std", cfg.task.mode_std},
               {"defect_radius", cfg.task.defect_radius}};
  j["model"] = {{"time_dim", cfg.model.time_dim},
                {"cond_dim", cfg.model.cond_dim},
                {"hidden", cfg.model.hidden},
                {"hidden_layers", cfg.model.hidden_layers},
                {"skip_layer", cfg.model.skip_layer}};
  j["sampler"] = sampler_json(cfg.sampler);
  j["oracle"] = {{"flip_prob", cfg.oracle.flip_prob}};
  j["data"] = {{"n_pos", cfg.data.n_pos}, {"n_neg", cfg.data.n_neg}};
  j["eval"] = {{"n_eval", cfg.eval.n_eval},
               {"grid_steps", cfg.eval.grid_steps},
               {"deployment_shift", cfg.eval.deployment_shift},
               {"omega", cfg.eval.guidance.omega},
               {"lambda", cfg.eval.guidance.lambda},
               {"every", cfg.eval.every}};
  j["stages"] = {
      {"pretrain",
       {{"steps", cfg.pretrain.steps},
        {"lr", cfg.pretrain.lr},
        {"batch", cfg.pretrain.batch},
        {"null_prob", cfg.pretrain.null_prob},
        {"log_every", cfg.pretrain.log_every}}},
      {"online", preference_json(cfg.online)},
      {"half_online", preference_json(cfg.half_online)},
      {"offline", preference_json(cfg.offline)},
      {"distill",
       {{"steps", cfg.distill.steps},
        {"lr", cfg.distill.lr},
        {"batch", cfg.distill.batch},
        {"omega", cfg.distill.guidance.omega},
        {"lambda", cfg.distill.guidance.lambda},
        {"log_every", cfg.distill.log_every}}},
      {"distill_aware", preference_json(cfg.distill_aware)},
  };
  return j.dump();
}

std::uint64_t config_hash(const RunConfig& cfg) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char ch : config_to_json(cfg)) {
    h ^= ch;
    h *= 0x100000001B3ull;
  }
  return h;
}

std::string config_hash_hex(const RunConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(config_hash(cfg)));
  return buf;
}

}  // namespace diffapo

// Copyright 2026 The diffapo Authors
// SPDX-License-Identifier: Apache-2.0

// Run configuration. The on-disk form is a single JSON document; every key is
// optional, unknown keys are rejected, and all invariants are checked before
// anything runs.
//
//   {
//     "seed": 0, "T": 1000, "output_dir": "runs/default", "init_checkpoint": "",
//     "task":    {"num_modes", "radius", "mode_std", "defect_radius"},
//     "model":   {"time_dim", "cond_dim", "hidden", "hidden_layers", "skip_layer"},
//     "sampler": {"shift_set", "gamma", "high_threshold", "n_high", "n_low", "stride"},
//     "oracle":  {"flip_prob"},
//     "data":    {"n_pos", "n_neg"},
//     "eval":    {"n_eval", "grid_steps", "deployment_shift", "omega", "lambda", "every"},
//     "stages": {
//       "pretrain":      {"steps", "lr", "batch", "null_prob", "log_every"},
//       "online" | "half_online" | "offline" | "distill_aware":
//                        {"steps", "beta", "lr", "timestep_mode", "sampler"},
//       "distill":       {"steps", "lr", "batch", "omega", "lambda", "log_every"}
//     }
//   }

#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "diffapo/apo.hpp"
#include "diffapo/diffusion.hpp"
#include "diffapo/synthworld.hpp"

namespace diffapo {

struct PretrainConfig {
  int steps = 5000;
  double lr = 1e-3;
  int batch = 128;
  double null_prob = 0.1;
  int log_every = 10;
};

struct PreferenceStageConfig {
  int steps = 300;
  double beta = 1.0;
  double lr = 1e-5;
  apo::TimestepMode timestep_mode = apo::TimestepMode::apo;
  /// Overrides the run-level sampler for this stage.
  std::optional<apo::SamplerConfig> sampler;
};

struct DistillConfig {
  int steps = 2000;
  double lr = 1e-3;  ///< peak; cosine decay to zero over the stage
  int batch = 128;
  diffusion::GuidanceConfig guidance{1.0, 0.1};
  int log_every = 10;
};

struct DataConfig {
  int n_pos = 1800;
  int n_neg = 1200;
};

struct EvalConfig {
  int n_eval = 512;
  int grid_steps = 20;
  double deployment_shift = 3.0;
  diffusion::GuidanceConfig guidance{1.0, 0.1};
  int every = 50;
};

struct RunConfig {
  std::uint64_t seed = 0;
  int T = 1000;
  std::string output_dir = "runs/default";
  std::string init_checkpoint;
  synth::TaskSpec task;
  diffusion::EpsModelConfig model;
  apo::SamplerConfig sampler;
  synth::OracleConfig oracle;
  DataConfig data;
  EvalConfig eval;
  PretrainConfig pretrain;
  PreferenceStageConfig online;
  PreferenceStageConfig half_online;
  PreferenceStageConfig offline;
  DistillConfig distill;
  PreferenceStageConfig distill_aware{200, 1.0, 1e-5, apo::TimestepMode::apo, std::nullopt};

  /// Throws ConfigError naming the first violated invariant.
  void validate() const;
  /// Sampler used by a preference stage (stage override or run-level).
  apo::SamplerConfig sampler_for(const PreferenceStageConfig& stage) const;
};

RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::string& path);
/// Canonical JSON (sorted keys, every field present).
std::string config_to_json(const RunConfig& cfg);
std::uint64_t config_hash(const RunConfig& cfg);
std::string config_hash_hex(const RunConfig& cfg);

}  // namespace diffapo

// Copyright 2026 The diffapo Authors
// SPDX-License-Identifier: Apache-2.0

// diffapo: generate data, run the alignment pipeline, evaluate checkpoints and
// plot metrics.
//
//   diffapo [--config cfg.json] [--seed N] [--out DIR] gen-data
//   diffapo ... run (--stage NAME | --all)
//   diffapo ... eval --checkpoint PATH
//   diffapo ... report metrics.csv [more.csv ...]

#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "diffapo/diffapo.h"

namespace {

int exit_code(dapo_status s) { return s <= DAPO_ERR_CSV ? static_cast<int>(s) : 1; }

int fail(dapo_status s) {
  std::fprintf(stderr, "diffapo: %s: %s\n", dapo_status_name(s), dapo_last_error());
  return exit_code(s);
}

struct ConfigHandle {
  dapo_config* ptr = nullptr;
  ~ConfigHandle() { dapo_config_free(ptr); }
};

std::string output_dir(const dapo_config* cfg) {
  size_t needed = 0;
  dapo_config_output_dir(cfg, nullptr, 0, &needed);
  std::string s(needed, '\0');
  dapo_config_output_dir(cfg, s.data(), s.size(), &needed);
  s.resize(needed - 1);
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Trajectory-aware preference optimisation on a toy conditional diffusion model"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  app.add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Override the master seed");
  app.add_option("--out", out_dir, "Override the output directory");

  auto* gen = app.add_subcommand("gen-data", "Write the offline records and pairs files");
  gen->fallthrough();

  auto* run = app.add_subcommand("run", "Run one pipeline stage or all of them");
  run->fallthrough();
  std::string stage;
  bool all = false;
  auto* stage_opt = run->add_option("--stage", stage, "pretrain, online, half_online, offline, distill, distill_aware");
  auto* all_flag = run->add_flag("--all", all, "Run every stage in order");
  stage_opt->excludes(all_flag);
  run->require_option(1);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->fallthrough();
  std::string checkpoint;
  eval->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate")->required();

  auto* report = app.add_subcommand("report", "Plot one or more metrics CSV files");
  report->fallthrough();
  std::vector<std::string> csvs;
  report->add_option("csv", csvs, "Metrics CSV files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  ConfigHandle cfg;
  dapo_status s = config_path.empty() ? dapo_config_default(&cfg.ptr) : dapo_config_load(config_path.c_str(), &cfg.ptr);
  if (s != DAPO_OK) return fail(s);
  if (seed && (s = dapo_config_set_seed(cfg.ptr, *seed)) != DAPO_OK) return fail(s);
  if (!out_dir.empty() && (s = dapo_config_set_output_dir(cfg.ptr, out_dir.c_str())) != DAPO_OK) return fail(s);

  char hash[17];
  if ((s = dapo_config_hash(cfg.ptr, hash, sizeof hash)) != DAPO_OK) return fail(s);
  std::printf("config %s\n", hash);
  const std::string out = output_dir(cfg.ptr);

  if (*gen) {
    size_t records = 0, pairs = 0;
    if ((s = dapo_gen_data(cfg.ptr, &records, &pairs)) != DAPO_OK) return fail(s);
    std::printf("records %zu -> %s/records.tsv\n", records, out.c_str());
    std::printf("pairs %zu -> %s/pairs.tsv\n", pairs, out.c_str());
  } else if (*run) {
    if ((s = dapo_run(cfg.ptr, all ? nullptr : stage.c_str())) != DAPO_OK) return fail(s);
    if (all) {
      std::printf("metrics -> %s/metrics.csv\n", out.c_str());
    } else {
      std::printf("checkpoint -> %s/%s.apockpt\n", out.c_str(), stage.c_str());
      std::printf("metrics -> %s/metrics_%s.csv\n", out.c_str(), stage.c_str());
    }
  } else if (*eval) {
    dapo_eval_report r{};
    if ((s = dapo_eval(cfg.ptr, checkpoint.c_str(), &r)) != DAPO_OK) return fail(s);
    std::printf("defect_rate=%.6f follow_rate=%.6f mean_quality=%.6f nfe=%d\n", r.defect_rate, r.follow_rate,
                r.mean_quality, r.nfe);
  } else if (*report) {
    std::vector<const char*> paths;
    for (const auto& c : csvs) paths.push_back(c.c_str());
    if ((s = dapo_report(paths.data(), paths.size(), out.c_str())) != DAPO_OK) return fail(s);
    std::printf("wrote %s/loss.svg %s/defect_rate.svg %s/comparison.svg\n", out.c_str(), out.c_str(), out.c_str());
  }
  return 0;
}

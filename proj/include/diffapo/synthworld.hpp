// Copyright 2026 The diffapo Authors
// SPDX-License-Identifier: Apache-2.0

// Conditional 2-D mixture task with a noisy ranking oracle, offline
// preference data and the defect / instruction-following metrics.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "diffapo/apo.hpp"
#include "diffapo/diffusion.hpp"
#include "diffapo/ndtensor.hpp"
#include "diffapo/rng.hpp"

namespace diffapo::synth {

/// Modes sit on a circle of `radius` at angles 2*pi*c/num_modes.
struct TaskSpec {
  int num_modes = 8;
  double radius = 2.0;
  double mode_std = 0.1;
  double defect_radius = 0.3;

  void validate() const;
};

struct OracleConfig {
  double flip_prob = 0.082;

  void validate() const;
  static OracleConfig human_centric() { return {0.082}; }
  static OracleConfig non_human_centric() { return {0.215}; }
};

enum class AnchorLabel { chosen_anchor, rejected_anchor };

struct OfflineRecord {
  int condition = 0;
  nd::Tensor sample;  ///< shape {2}
  AnchorLabel label = AnchorLabel::chosen_anchor;
};

struct OfflineDataset {
  std::vector<OfflineRecord> records;
  std::vector<apo::PreferencePair> pairs;
};

nd::Tensor mode_center(int c, const TaskSpec& task);
nd::Tensor sample_clean(int c, const TaskSpec& task, Rng& rng);

/// -||x - mu_c||.
double quality(const nd::Tensor& x, int c, const TaskSpec& task);
bool is_defect(const nd::Tensor& x, int c, const TaskSpec& task);
/// Nearest mode is c; ties go to the smaller index.
bool follows_instruction(const nd::Tensor& x, int c, const TaskSpec& task);

enum class Verdict { a_chosen, b_chosen };

/// Higher quality wins, inverted with probability flip_prob. Exact quality
/// ties always pick `a`.
Verdict rank_pair(const nd::Tensor& a, const nd::Tensor& b, int c, const OracleConfig& oracle, const TaskSpec& task,
                  Rng& rng);

/// Negative anchor for condition c: half the time a displacement of length
/// U[0.5, 1.0] from mu_c, otherwise a clean sample of a different condition.
nd::Tensor corrupt_sample(int c, const TaskSpec& task, Rng& rng);

/// n_pos clean records labelled chosen, n_neg corrupted records labelled
/// rejected, and n_pos (clean, corrupted) offline pairs with uniformly drawn
/// conditions.
OfflineDataset gen_offline_dataset(int n_pos, int n_neg, const TaskSpec& task, Rng& rng);

struct EvalReport {
  double defect_rate = 0.0;
  double follow_rate = 0.0;
  double mean_quality = 0.0;
  int nfe_per_sample = 0;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// Generates n_eval samples with conditions cycling over the modes.
EvalReport evaluate(const diffusion::Denoiser& model, const diffusion::NoiseSchedule& sched,
                    const diffusion::InferenceGrid& grid, const std::optional<diffusion::GuidanceConfig>& guidance,
                    const TaskSpec& task, int n_eval, std::uint64_t seed);

/// Metrics over already generated samples (rows x 2) for conditions[i].
EvalReport score_samples(const nd::Tensor& samples, const std::vector<int>& conditions, const TaskSpec& task);

// Tab-separated dataset files, one header line each.
void write_records_tsv(const std::string& path, const std::vector<OfflineRecord>& records);
std::vector<OfflineRecord> read_records_tsv(const std::string& path);
void write_pairs_tsv(const std::string& path, const std::vector<apo::PreferencePair>& pairs);
std::vector<apo::PreferencePair> read_pairs_tsv(const std::string& path);

inline constexpr const char* kRecordsHeader = "condition\tx\ty\tlabel";
inline constexpr const char* kPairsHeader = "condition\tchosen_x\tchosen_y\trejected_x\trejected_y\tsource";

}  // namespace diffapo::synth

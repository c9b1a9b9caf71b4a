// Copyright 2026 The diffapo Authors
// SPDX-License-Identifier: Apache-2.0

// Five-stage alignment curriculum on top of a pretrained denoiser:
// online -> half-online -> offline preference optimisation, guidance
// distillation into a single-pass student, then a final offline round on the
// student. Each preference stage freezes a copy of the model it starts from as
// its reference.

#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "diffapo/apo.hpp"
#include "diffapo/config.hpp"
#include "diffapo/diffusion.hpp"
#include "diffapo/synthworld.hpp"

namespace diffapo::pipeline {

enum class Stage { pretrain, online, half_online, offline, distill, distill_aware };

inline constexpr std::array<Stage, 6> kStageOrder = {Stage::pretrain, Stage::online,  Stage::half_online,
                                                     Stage::offline,  Stage::distill, Stage::distill_aware};

std::string stage_name(Stage stage);
std::optional<Stage> stage_from_name(const std::string& name);
/// Stage whose checkpoint feeds `stage`; empty for pretrain.
std::optional<Stage> previous_stage(Stage stage);

inline constexpr const char* kMetricsHeader = "step,stage,loss,margin,defect_rate,follow_rate,mean_quality,nfe";

struct MetricsRow {
  int step = 0;
  Stage stage = Stage::pretrain;
  std::optional<double> loss;
  std::optional<double> margin;
  std::optional<synth::EvalReport> eval;
};

class MetricsLog {
 public:
  void add(MetricsRow row) { rows_.push_back(std::move(row)); }
  const std::vector<MetricsRow>& rows() const noexcept { return rows_; }
  /// Last evaluation logged for `stage`, if any.
  std::optional<synth::EvalReport> last_eval(Stage stage) const;
  std::string to_csv() const;
  void write_csv(const std::string& path) const;

 private:
  std::vector<MetricsRow> rows_;
};

/// Bit-identity checks on a fixed probe batch.
struct ProbeRecord {
  Stage stage = Stage::pretrain;
  bool handoff_identical = true;  ///< reference == model at the first step
  bool reference_frozen = true;   ///< reference (or teacher) unchanged at the end
};

struct StageCounters {
  int windows = 0;
  int applied = 0;
  int skipped = 0;
  long reverse_runs = 0;
  long loss_evaluations = 0;  ///< model x sample x timestep
};

/// Everything one preference window consumed and produced.
struct WindowTrace {
  Stage stage = Stage::online;
  int window = 0;
  const apo::PreferencePair& pair;
  const apo::WindowDraw& draw;
  const apo::WindowNoise& noise;
  const apo::WindowStepResult& result;
};

class Pipeline {
 public:
  /// Fresh policy initialised from the master seed (or cfg.init_checkpoint).
  explicit Pipeline(RunConfig cfg);
  Pipeline(RunConfig cfg, diffusion::EpsModel initial);

  void run_stage(Stage stage);
  /// Runs every stage in order. With a nonempty `out_dir` writes
  /// `<out_dir>/<stage>.apockpt` after each stage and `<out_dir>/metrics.csv`.
  void run_all(const std::string& out_dir = "");

  void pretrain();
  void online();
  void half_online();
  void offline();
  void distill();
  void distill_aware();

  /// The model the most recent stage produced (policy, later the student).
  diffusion::EpsModel& model() noexcept { return model_; }
  const diffusion::EpsModel& model() const noexcept { return model_; }
  const diffusion::EpsModel& reference() const noexcept { return reference_; }
  const std::optional<diffusion::EpsModel>& teacher() const noexcept { return teacher_; }
  bool model_is_student() const noexcept { return is_student_; }
  /// Replaces the current model, e.g. with a checkpoint from `after`.
  void load_model(nd::ParamSet params, Stage after);

  const RunConfig& config() const noexcept { return cfg_; }
  const diffusion::NoiseSchedule& schedule() const noexcept { return sched_; }
  const diffusion::InferenceGrid& grid() const noexcept { return grid_; }
  const synth::OfflineDataset& dataset();
  void set_dataset(synth::OfflineDataset data) { dataset_ = std::move(data); }

  MetricsLog& metrics() noexcept { return metrics_; }
  const std::vector<ProbeRecord>& probes() const noexcept { return probes_; }
  const StageCounters& counters(Stage stage) const { return counters_.at(static_cast<std::size_t>(stage)); }
  const std::vector<std::string>& events() const noexcept { return events_; }

  /// Deployment evaluation of the current model: guided for teacher-side
  /// stages, single-pass once the model is the distilled student.
  synth::EvalReport evaluate_model() const;
  std::optional<diffusion::GuidanceConfig> deployment_guidance() const;

  /// Fixed probe inputs used for the bit-identity checks.
  const diffusion::Batch& probe_batch() const noexcept { return probe_; }

  /// Optional hook invoked after every preference window.
  std::function<void(const WindowTrace&)> on_window;

 private:
  using PairSourceFn = std::function<apo::PreferencePair(int window)>;

  void run_preference_stage(Stage stage, const PreferenceStageConfig& st, const PairSourceFn& next_pair);
  nd::Tensor generate(int condition, std::uint64_t seed);
  void log_eval(Stage stage, int step);

  RunConfig cfg_;
  diffusion::NoiseSchedule sched_;
  diffusion::InferenceGrid grid_;
  diffusion::EpsModel model_;
  diffusion::EpsModel reference_;
  std::optional<diffusion::EpsModel> teacher_;
  bool is_student_ = false;
  std::optional<synth::OfflineDataset> dataset_;
  diffusion::Batch probe_;
  MetricsLog metrics_;
  std::vector<ProbeRecord> probes_;
  std::array<StageCounters, 6> counters_{};
  std::vector<std::string> events_;
};

/// Half-online pair: a chosen anchor makes the generation the rejected sample
/// and a rejected anchor makes it the chosen one.
apo::PreferencePair half_online_pair(const synth::OfflineRecord& anchor, nd::Tensor generated);

/// Offline dataset for a run, drawn from the run's "data" stream.
synth::OfflineDataset generate_dataset(const RunConfig& cfg);

/// Mean over `n` held-out (x_t, t, c) draws of ||student - teacher_guided||^2.
double distillation_gap(const diffusion::Denoiser& student, const diffusion::Denoiser& teacher,
                        const diffusion::GuidanceConfig& guidance, const synth::TaskSpec& task,
                        const diffusion::NoiseSchedule& sched, int n, std::uint64_t seed);

}  // namespace diffapo::pipeline

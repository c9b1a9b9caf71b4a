// Copyright 2026 The diffapo Authors
// SPDX-License-Identifier: Apache-2.0

#include "diffapo/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "diffapo/checkpoint.hpp"
#include "diffapo/optim.hpp"

namespace diffapo::pipeline {

using diffusion::Batch;
using diffusion::EpsModel;
using nd::Shape;
using nd::Tensor;

std::string stage_name(Stage stage) {
  switch (stage) {
    case Stage::pretrain: return "pretrain";
    case Stage::online: return "online";
    case Stage::half_online: return "half_online";
    case Stage::offline: return "offline";
    case Stage::distill: return "distill";
    case Stage::distill_aware: return "distill_aware";
  }
  return "?";
}

std::optional<Stage> stage_from_name(const std::string& name) {
  for (Stage s : kStageOrder) {
    if (stage_name(s) == name) return s;
  }
  return std::nullopt;
}

std::optional<Stage> previous_stage(Stage stage) {
  const auto i = static_cast<std::size_t>(stage);
  if (i == 0) return std::nullopt;
  return kStageOrder[i - 1];
}

// ---------------------------------------------------------------------------
// Metrics

std::optional<synth::EvalReport> MetricsLog::last_eval(Stage stage) const {
  for (auto it = rows_.rbegin(); it != rows_.rend(); ++it) {
    if (it->stage == stage && it->eval) return it->eval;
  }
  return std::nullopt;
}

namespace {

std::string num(const std::optional<double>& v) {
  if (!v) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", *v);
  return buf;
}

}  // namespace

std::string MetricsLog::to_csv() const {
  std::ostringstream os;
  os << kMetricsHeader << '\n';
  for (const auto& r : rows_) {
    os << r.step << ',' << stage_name(r.stage) << ',' << num(r.loss) << ',' << num(r.margin) << ',';
    if (r.eval) {
      os << num(r.eval->defect_rate) << ',' << num(r.eval->follow_rate) << ',' << num(r.eval->mean_quality) << ','
         << r.eval->nfe_per_sample;
    } else {
      os << ",,,";
    }
    os << '\n';
  }
  return os.str();
}

void MetricsLog::write_csv(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << to_csv();
  if (!out) throw Error("failed writing '" + path + "'");
}

// ---------------------------------------------------------------------------

namespace {

EpsModel initial_model(const RunConfig& cfg) {
  if (!cfg.init_checkpoint.empty()) {
    return EpsModel(cfg.model, nd::load_checkpoint(cfg.init_checkpoint));
  }
  Rng rng = Rng::stream(cfg.seed, "init");
  return EpsModel(cfg.model, rng);
}

Batch make_probe(const RunConfig& cfg) {
  Rng rng = Rng::stream(cfg.seed, "probe");
  constexpr std::size_t rows = 16;
  Batch b;
  b.x_t = diffusion::normal_tensor(Shape{rows, 2}, rng);
  for (std::size_t i = 0; i < rows; ++i) {
    b.t.push_back(rng.uniform_int(0, cfg.T));
    b.c.push_back(i % 4 == 3 ? diffusion::kNullCondition : rng.uniform_int(0, cfg.task.num_modes - 1));
  }
  return b;
}

std::uint64_t eval_seed(const RunConfig& cfg) { return derive_seed(cfg.seed, "eval"); }

}  // namespace

synth::OfflineDataset generate_dataset(const RunConfig& cfg) {
  Rng rng = Rng::stream(cfg.seed, "data");
  return synth::gen_offline_dataset(cfg.data.n_pos, cfg.data.n_neg, cfg.task, rng);
}

Pipeline::Pipeline(RunConfig cfg) : Pipeline(cfg, initial_model(cfg)) {}

Pipeline::Pipeline(RunConfig cfg, EpsModel initial)
    : cfg_(std::move(cfg)),
      sched_(diffusion::NoiseSchedule::linear(cfg_.T)),
      grid_(diffusion::build_inference_grid(cfg_.eval.grid_steps, cfg_.eval.deployment_shift, cfg_.T)),
      model_(std::move(initial)),
      reference_(model_),
      probe_(make_probe(cfg_)) {
  cfg_.validate();
}

void Pipeline::load_model(nd::ParamSet params, Stage after) {
  model_ = EpsModel(cfg_.model, std::move(params));
  is_student_ = after == Stage::distill || after == Stage::distill_aware;
  reference_ = model_;
}

const synth::OfflineDataset& Pipeline::dataset() {
  if (!dataset_) dataset_ = generate_dataset(cfg_);
  return *dataset_;
}

std::optional<diffusion::GuidanceConfig> Pipeline::deployment_guidance() const {
  if (is_student_) return std::nullopt;
  return cfg_.eval.guidance;
}

synth::EvalReport Pipeline::evaluate_model() const {
  return synth::evaluate(model_, sched_, grid_, deployment_guidance(), cfg_.task, cfg_.eval.n_eval, eval_seed(cfg_));
}

void Pipeline::log_eval(Stage stage, int step) {
  MetricsRow row;
  row.step = step;
  row.stage = stage;
  row.eval = evaluate_model();
  metrics_.add(row);
}

Tensor Pipeline::generate(int condition, std::uint64_t seed) {
  const int c[] = {condition};
  const auto out = diffusion::sample_reverse(model_, c, grid_, sched_, deployment_guidance(), seed);
  return Tensor::vector({out.x0.at(0, 0), out.x0.at(0, 1)});
}

void Pipeline::run_stage(Stage stage) {
  switch (stage) {
    case Stage::pretrain: return pretrain();
    case Stage::online: return online();
    case Stage::half_online: return half_online();
    case Stage::offline: return offline();
    case Stage::distill: return distill();
    case Stage::distill_aware: return distill_aware();
  }
}

void Pipeline::run_all(const std::string& out_dir) {
  for (Stage stage : kStageOrder) {
    run_stage(stage);
    if (!out_dir.empty()) {
      nd::save_checkpoint(model_.params(), out_dir + "/" + stage_name(stage) + ".apockpt");
      metrics_.write_csv(out_dir + "/metrics.csv");
    }
  }
}

// ---------------------------------------------------------------------------
// Stages

void Pipeline::pretrain() {
  const PretrainConfig& pc = cfg_.pretrain;
  Rng rng = Rng::stream(cfg_.seed, "pretrain");
  nd::AdamW opt({.lr = pc.lr});
  const auto B = static_cast<std::size_t>(pc.batch);
  auto& params = model_.params();

  for (int step = 0; step < pc.steps; ++step) {
    const bool null_batch = rng.bernoulli(pc.null_prob);
    Tensor x0(Shape{B, 2});
    std::vector<int> c(B), t(B);
    for (std::size_t i = 0; i < B; ++i) {
      const int cond = rng.uniform_int(0, cfg_.task.num_modes - 1);
      const Tensor x = synth::sample_clean(cond, cfg_.task, rng);
      x0.at(i, 0) = x[0];
      x0.at(i, 1) = x[1];
      c[i] = null_batch ? diffusion::kNullCondition : cond;
      t[i] = rng.uniform_int(1, cfg_.T);
    }
    const Tensor eps = diffusion::normal_tensor(Shape{B, 2}, rng);

    params.zero_grad();
    double loss = 0.0;
    try {
      nd::Tape tape;
      loss = tape.backward(diffusion::record_dm_loss(tape, model_, x0, c, t, eps, sched_, true), &params);
    } catch (const NonFiniteError&) {
      throw NonFiniteError("pretrain", static_cast<std::size_t>(step));
    }
    opt.step(params);
    if (!opt.warnings().empty()) throw NonFiniteError("pretrain", static_cast<std::size_t>(step));
    if (step % pc.log_every == 0) metrics_.add({step, Stage::pretrain, loss, std::nullopt, std::nullopt});
  }
  log_eval(Stage::pretrain, pc.steps);
  reference_ = model_;
}

void Pipeline::run_preference_stage(Stage stage, const PreferenceStageConfig& st, const PairSourceFn& next_pair) {
  reference_ = model_;
  ProbeRecord probe{stage, true, true};
  const Tensor ref_before = reference_.predict(probe_);
  probe.handoff_identical = nd::bit_identical(ref_before, model_.predict(probe_));

  StageCounters& counters = counters_[static_cast<std::size_t>(stage)];
  const std::string name = stage_name(stage);
  apo::TimestepSampler sampler(cfg_.sampler_for(st), st.timestep_mode);
  Rng timestep_rng = Rng::stream(cfg_.seed, name + ".timesteps");
  Rng noise_rng = Rng::stream(cfg_.seed, name + ".noise");
  nd::AdamW opt({.lr = st.lr});

  for (int w = 0; w < st.steps; ++w) {
    const bool eval_now = w % cfg_.eval.every == 0;
    std::optional<synth::EvalReport> report;
    if (eval_now) report = evaluate_model();

    apo::PreferencePair pair;
    try {
      pair = next_pair(w);
    } catch (const NonFiniteError&) {
      throw NonFiniteError(name, static_cast<std::size_t>(w));
    }
    const apo::WindowDraw window = sampler.next(timestep_rng);
    const apo::WindowNoise noise = apo::draw_window_noise(window.size(), pair.chosen.size(), noise_rng);
    const auto result = apo::apo_window_step(model_, reference_, pair, window, noise, st.beta, sched_, opt);
    ++counters.windows;
    counters.loss_evaluations += 4L * static_cast<long>(window.size());
    if (result.applied) {
      ++counters.applied;
    } else {
      ++counters.skipped;
      events_.push_back(name + " window " + std::to_string(w) + ": " + result.event);
    }
    if (on_window) on_window(WindowTrace{stage, w, pair, window, noise, result});

    MetricsRow row{w, stage, std::nullopt, std::nullopt, report};
    if (result.applied) {
      row.loss = result.loss_total;
      row.margin = result.margin;
    }
    metrics_.add(row);
    for (const auto& e : model_.params()) {
      if (!e.value.all_finite()) throw NonFiniteError(name, static_cast<std::size_t>(w));
    }
  }
  log_eval(stage, st.steps);
  probe.reference_frozen = nd::bit_identical(ref_before, reference_.predict(probe_));
  probes_.push_back(probe);
}

void Pipeline::online() {
  Rng cond_rng = Rng::stream(cfg_.seed, "online.conditions");
  Rng oracle_rng = Rng::stream(cfg_.seed, "online.oracle");
  auto& counters = counters_[static_cast<std::size_t>(Stage::online)];
  run_preference_stage(Stage::online, cfg_.online, [&](int w) {
    const int c = cond_rng.uniform_int(0, cfg_.task.num_modes - 1);
    const auto base = static_cast<std::uint64_t>(w);
    Tensor a = generate(c, derive_seed(cfg_.seed, "online.candidates", 2 * base));
    Tensor b = generate(c, derive_seed(cfg_.seed, "online.candidates", 2 * base + 1));
    counters.reverse_runs += 2;
    const auto verdict = synth::rank_pair(a, b, c, cfg_.oracle, cfg_.task, oracle_rng);
    if (verdict == synth::Verdict::a_chosen) return apo::PreferencePair{c, a, b, apo::PairSource::online};
    return apo::PreferencePair{c, b, a, apo::PairSource::online};
  });
}

apo::PreferencePair half_online_pair(const synth::OfflineRecord& anchor, Tensor generated) {
  if (anchor.label == synth::AnchorLabel::chosen_anchor) {
    return {anchor.condition, anchor.sample, std::move(generated), apo::PairSource::half_online};
  }
  return {anchor.condition, std::move(generated), anchor.sample, apo::PairSource::half_online};
}

void Pipeline::half_online() {
  const auto& records = dataset().records;
  if (records.empty()) throw ConfigError("half_online stage needs offline records (data.n_pos + data.n_neg > 0)");
  Rng pick_rng = Rng::stream(cfg_.seed, "half_online.records");
  auto& counters = counters_[static_cast<std::size_t>(Stage::half_online)];
  run_preference_stage(Stage::half_online, cfg_.half_online, [&](int w) {
    const auto& rec = records[static_cast<std::size_t>(pick_rng.uniform_int(0, static_cast<int>(records.size()) - 1))];
    Tensor generated = generate(rec.condition, derive_seed(cfg_.seed, "half_online.generation", static_cast<std::uint64_t>(w)));
    ++counters.reverse_runs;
    return half_online_pair(rec, std::move(generated));
  });
}

void Pipeline::offline() {
  const auto& pairs = dataset().pairs;
  if (pairs.empty()) throw ConfigError("offline stage needs offline pairs (data.n_pos > 0)");
  Rng pick_rng = Rng::stream(cfg_.seed, "offline.pairs");
  run_preference_stage(Stage::offline, cfg_.offline, [&](int) {
    return pairs[static_cast<std::size_t>(pick_rng.uniform_int(0, static_cast<int>(pairs.size()) - 1))];
  });
}

void Pipeline::distill() {
  const DistillConfig& dc = cfg_.distill;
  teacher_ = model_;
  const EpsModel& teacher = *teacher_;
  ProbeRecord probe{Stage::distill, true, true};
  const Tensor teacher_before = teacher.predict(probe_);
  EpsModel student = teacher;
  probe.handoff_identical = nd::bit_identical(teacher_before, student.predict(probe_));

  Rng rng = Rng::stream(cfg_.seed, "distill");
  nd::AdamW opt({.lr = dc.lr});
  const auto B = static_cast<std::size_t>(dc.batch);
  auto& params = student.params();

  for (int step = 0; step < dc.steps; ++step) {
    // Cosine decay to zero over the stage.
    opt.set_lr(dc.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * step / dc.steps)));
    Batch batch;
    Tensor x0(Shape{B, 2});
    for (std::size_t i = 0; i < B; ++i) {
      const int cond = rng.uniform_int(0, cfg_.task.num_modes - 1);
      const Tensor x = synth::sample_clean(cond, cfg_.task, rng);
      x0.at(i, 0) = x[0];
      x0.at(i, 1) = x[1];
      batch.c.push_back(cond);
      batch.t.push_back(rng.uniform_int(1, cfg_.T));
    }
    const Tensor eps = diffusion::normal_tensor(Shape{B, 2}, rng);
    batch.x_t = diffusion::forward_diffuse_rows(x0, batch.t, eps, sched_);
    const Tensor target = diffusion::guided_predict(teacher, batch, dc.guidance).eps;

    params.zero_grad();
    double loss = 0.0;
    try {
      nd::Tape tape;
      nd::Var pred = student.record(tape, batch, diffusion::Pass::normal, true);
      nd::Var err = nd::sub(tape, pred, tape.constant(target));
      nd::Var l = nd::scale(tape, tape.sum(tape.square(err)), 1.0 / static_cast<double>(B));
      loss = tape.backward(l, &params);
    } catch (const NonFiniteError&) {
      throw NonFiniteError("distill", static_cast<std::size_t>(step));
    }
    opt.step(params);
    if (!opt.warnings().empty()) throw NonFiniteError("distill", static_cast<std::size_t>(step));
    if (step % dc.log_every == 0) metrics_.add({step, Stage::distill, loss, std::nullopt, std::nullopt});
  }
  probe.reference_frozen = nd::bit_identical(teacher_before, teacher.predict(probe_));
  probes_.push_back(probe);

  model_ = std::move(student);
  is_student_ = true;
  reference_ = model_;
  log_eval(Stage::distill, dc.steps);
}

void Pipeline::distill_aware() {
  const auto& pairs = dataset().pairs;
  if (pairs.empty()) throw ConfigError("distill_aware stage needs offline pairs (data.n_pos > 0)");
  is_student_ = true;
  std::optional<Tensor> teacher_before;
  if (teacher_) teacher_before = teacher_->predict(probe_);
  Rng pick_rng = Rng::stream(cfg_.seed, "distill_aware.pairs");
  run_preference_stage(Stage::distill_aware, cfg_.distill_aware, [&](int) {
    return pairs[static_cast<std::size_t>(pick_rng.uniform_int(0, static_cast<int>(pairs.size()) - 1))];
  });
  if (teacher_before && !nd::bit_identical(*teacher_before, teacher_->predict(probe_))) {
    probes_.back().reference_frozen = false;
  }
}

double distillation_gap(const diffusion::Denoiser& student, const diffusion::Denoiser& teacher,
                        const diffusion::GuidanceConfig& guidance, const synth::TaskSpec& task,
                        const diffusion::NoiseSchedule& sched, int n, std::uint64_t seed) {
  Rng rng(seed);
  Batch batch;
  const auto N = static_cast<std::size_t>(n);
  Tensor x0(Shape{N, 2});
  for (std::size_t i = 0; i < N; ++i) {
    const int cond = rng.uniform_int(0, task.num_modes - 1);
    const Tensor x = synth::sample_clean(cond, task, rng);
    x0.at(i, 0) = x[0];
    x0.at(i, 1) = x[1];
    batch.c.push_back(cond);
    batch.t.push_back(rng.uniform_int(1, sched.max_timestep()));
  }
  const Tensor eps = diffusion::normal_tensor(Shape{N, 2}, rng);
  batch.x_t = diffusion::forward_diffuse_rows(x0, batch.t, eps, sched);
  const Tensor target = diffusion::guided_predict(teacher, batch, guidance).eps;
  const Tensor pred = student.predict(batch);
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += (pred[i] - target[i]) * (pred[i] - target[i]);
  return acc / static_cast<double>(N);
}

}  // namespace diffapo::pipeline

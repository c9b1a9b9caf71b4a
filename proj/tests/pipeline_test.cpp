// Copyright 2026 The diffapo Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "diffapo/pipeline.hpp"

namespace diffapo::pipeline {
namespace {

using nd::Tensor;

RunConfig tiny_config(std::uint64_t seed = 3) {
  RunConfig cfg;
  cfg.seed = seed;
  cfg.model.time_dim = 8;
  cfg.model.cond_dim = 8;
  cfg.model.hidden = 16;
  cfg.data = {40, 30};
  cfg.eval.n_eval = 16;
  cfg.eval.grid_steps = 4;
  cfg.eval.every = 5;
  cfg.pretrain.steps = 30;
  cfg.pretrain.batch = 16;
  cfg.pretrain.log_every = 10;
  cfg.online.steps = 6;
  cfg.half_online.steps = 6;
  cfg.offline.steps = 6;
  cfg.distill.steps = 10;
  cfg.distill.batch = 16;
  cfg.distill.log_every = 5;
  cfg.distill_aware.steps = 6;
  return cfg;
}

RunConfig zero_steps(RunConfig cfg) {
  cfg.pretrain.steps = 0;
  cfg.online.steps = cfg.half_online.steps = cfg.offline.steps = cfg.distill_aware.steps = 0;
  cfg.distill.steps = 0;
  return cfg;
}

TEST(Stages, NamesAndOrder) {
  for (Stage s : kStageOrder) EXPECT_EQ(stage_from_name(stage_name(s)), s);
  EXPECT_FALSE(stage_from_name("warmup").has_value());
  EXPECT_FALSE(previous_stage(Stage::pretrain).has_value());
  EXPECT_EQ(previous_stage(Stage::offline), Stage::half_online);
  EXPECT_EQ(previous_stage(Stage::distill_aware), Stage::distill);
}

TEST(Stages, HalfOnlineRoles) {
  const Tensor anchor = Tensor::vector({2, 0});
  const Tensor generated = Tensor::vector({0.5, 0.5});
  const auto a = half_online_pair({0, anchor, synth::AnchorLabel::chosen_anchor}, generated);
  EXPECT_EQ(a.chosen, anchor);
  EXPECT_EQ(a.rejected, generated);
  const auto b = half_online_pair({0, anchor, synth::AnchorLabel::rejected_anchor}, generated);
  EXPECT_EQ(b.chosen, generated);
  EXPECT_EQ(b.rejected, anchor);
  EXPECT_EQ(b.source, apo::PairSource::half_online);
}

TEST(Pipeline, ZeroStepsLeaveModelUnchanged) {
  Pipeline p(zero_steps(tiny_config()));
  const nd::ParamSet initial = p.model().params();
  p.run_all();
  EXPECT_TRUE(p.model().params().values_identical(initial));
  EXPECT_TRUE(p.model_is_student());
  for (const auto& probe : p.probes()) {
    EXPECT_TRUE(probe.handoff_identical);
    EXPECT_TRUE(probe.reference_frozen);
  }
}

TEST(Pipeline, UnguidedDistillStartsAtZeroLoss) {
  RunConfig cfg = zero_steps(tiny_config());
  cfg.distill.steps = 1;
  cfg.distill.log_every = 1;
  cfg.distill.guidance = {0.0, 0.0};
  Pipeline p(cfg);
  p.distill();
  ASSERT_FALSE(p.metrics().rows().empty());
  EXPECT_EQ(p.metrics().rows().front().stage, Stage::distill);
  EXPECT_EQ(*p.metrics().rows().front().loss, 0.0);
}

TEST(Pipeline, FullRunProbesCountersAndMetrics) {
  const RunConfig cfg = tiny_config();
  Pipeline p(cfg);
  p.run_all();

  ASSERT_EQ(p.probes().size(), 5u);
  for (const auto& probe : p.probes()) {
    EXPECT_TRUE(probe.handoff_identical) << stage_name(probe.stage);
    EXPECT_TRUE(probe.reference_frozen) << stage_name(probe.stage);
  }
  const long K = cfg.sampler.window_size();
  const auto& on = p.counters(Stage::online);
  EXPECT_EQ(on.windows, cfg.online.steps);
  EXPECT_EQ(on.reverse_runs, 2L * cfg.online.steps);
  EXPECT_EQ(on.loss_evaluations, 4 * K * cfg.online.steps);
  EXPECT_EQ(p.counters(Stage::half_online).reverse_runs, cfg.half_online.steps);
  EXPECT_EQ(p.counters(Stage::offline).reverse_runs, 0);
  EXPECT_EQ(on.applied + on.skipped, on.windows);

  const std::string csv = p.metrics().to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), kMetricsHeader);
  for (Stage s : kStageOrder) {
    const auto eval = p.metrics().last_eval(s);
    ASSERT_TRUE(eval.has_value()) << stage_name(s);
    const bool student = s == Stage::distill || s == Stage::distill_aware;
    EXPECT_EQ(eval->nfe_per_sample, (student ? 1 : 3) * static_cast<int>(p.grid().size())) << stage_name(s);
  }
  ASSERT_TRUE(p.teacher().has_value());
  EXPECT_FALSE(p.teacher()->params().values_identical(p.model().params()));
}

TEST(Pipeline, SameSeedSameBytes) {
  Pipeline a(tiny_config(5)), b(tiny_config(5)), c(tiny_config(6));
  a.run_all();
  b.run_all();
  c.run_all();
  EXPECT_EQ(a.metrics().to_csv(), b.metrics().to_csv());
  EXPECT_TRUE(a.model().params().values_identical(b.model().params()));
  EXPECT_NE(a.metrics().to_csv(), c.metrics().to_csv());
}

TEST(Pipeline, DistillAwareLeavesTeacherAlone) {
  RunConfig cfg = tiny_config();
  cfg.online.steps = cfg.half_online.steps = cfg.offline.steps = 0;
  Pipeline p(cfg);
  p.pretrain();
  p.distill();
  const nd::ParamSet teacher = p.teacher()->params();
  const nd::ParamSet student = p.model().params();
  p.distill_aware();
  EXPECT_TRUE(p.teacher()->params().values_identical(teacher));
  EXPECT_FALSE(p.model().params().values_identical(student));
  EXPECT_TRUE(p.probes().back().handoff_identical);
  EXPECT_FALSE(p.deployment_guidance().has_value());
}

TEST(Offline, SinglePairLossDecreasesAtFixedDraws) {
  const RunConfig cfg = tiny_config();
  Pipeline p(cfg);
  p.pretrain();
  diffusion::EpsModel policy = p.model();
  const apo::PreferencePair pair{1, Tensor::vector({1.4, 1.4}), Tensor::vector({0.3, 0.2}), apo::PairSource::offline};
  Rng rng(21);
  const apo::WindowDraw window = apo::draw_window(cfg.sampler_for(cfg.offline), rng);
  const apo::WindowNoise noise = apo::draw_window_noise(window.size(), 2, rng);
  nd::AdamW opt({.lr = cfg.offline.lr});
  double previous = INFINITY;
  for (int i = 0; i < 20; ++i) {
    const auto r = apo::apo_window_step(policy, p.reference(), pair, window, noise, cfg.offline.beta, p.schedule(), opt);
    ASSERT_TRUE(r.applied);
    EXPECT_LT(r.loss_total, previous) << "step " << i;
    previous = r.loss_total;
  }
}

TEST(Offline, SymmetricPairsBarelyMove) {
  RunConfig cfg = tiny_config();
  cfg.offline.steps = 100;
  cfg.eval.every = 1000;
  Pipeline p(cfg);
  p.pretrain();
  std::vector<apo::PreferencePair> pairs;
  Rng rng(8);
  for (int i = 0; i < 50; ++i) {
    const int c = i % 8;
    const Tensor x = synth::sample_clean(c, cfg.task, rng);
    pairs.push_back({c, x, x, apo::PairSource::offline});
  }
  p.set_dataset({{}, pairs});
  const nd::ParamSet before = p.model().params();
  double margin_sum = 0.0;
  p.on_window = [&](const WindowTrace& w) { margin_sum += w.result.margin; };
  p.offline();
  double drift = 0.0;
  for (std::size_t e = 0; e < before.size(); ++e) {
    for (std::size_t i = 0; i < before[e].value.size(); ++i) {
      drift = std::max(drift, std::abs(before[e].value[i] - p.model().params()[e].value[i]));
    }
  }
  EXPECT_LT(drift, 1e-3);
  EXPECT_LT(std::abs(margin_sum / cfg.offline.steps), 0.05);
}

TEST(Pipeline, DivergenceAbortsWithStepIndex) {
  RunConfig cfg = tiny_config();
  cfg.pretrain.lr = 1e300;
  Pipeline p(cfg);
  try {
    p.pretrain();
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_EQ(e.where(), "pretrain");
    EXPECT_LT(e.index(), static_cast<std::size_t>(cfg.pretrain.steps));
  }
}

TEST(Config, StrictParsing) {
  EXPECT_NO_THROW(parse_config("{}"));
  EXPECT_THROW(parse_config(R"({"sed": 1})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"sampler": {"gamma": -1}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"stages": {"online": {"timestep_mode": "cosine"}}})"), ConfigError);
  EXPECT_THROW(parse_config("[1, 2"), ConfigError);
  const RunConfig cfg = parse_config(R"({"seed": 9, "stages": {"offline": {"timestep_mode": "uniform", "steps": 7}}})");
  EXPECT_EQ(cfg.seed, 9u);
  EXPECT_EQ(cfg.offline.steps, 7);
  EXPECT_EQ(cfg.offline.timestep_mode, apo::TimestepMode::uniform);
  EXPECT_EQ(config_to_json(parse_config(config_to_json(cfg))), config_to_json(cfg));
  EXPECT_EQ(config_hash(cfg), config_hash(parse_config(config_to_json(cfg))));
  EXPECT_NE(config_hash(cfg), config_hash(RunConfig{}));
  EXPECT_EQ(config_hash_hex(cfg).size(), 16u);
}

}  // namespace
}  // namespace diffapo::pipeline

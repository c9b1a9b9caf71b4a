// Copyright 2026 The diffapo Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "diffapo/diffusion.hpp"
#include "stubs.hpp"

namespace diffapo::diffusion {
namespace {

using nd::Shape;
using nd::Tensor;
using testing::ConstantDenoiser;
using testing::FixedDenoiser;

EpsModelConfig small_config() {
  EpsModelConfig cfg;
  cfg.num_conditions = 3;
  cfg.time_dim = 4;
  cfg.cond_dim = 3;
  cfg.hidden = 6;
  cfg.hidden_layers = 2;
  return cfg;
}

Batch random_batch(std::size_t rows, int num_conditions, Rng& rng, bool with_null = true) {
  Batch b;
  b.x_t = normal_tensor(Shape{rows, 2}, rng);
  for (std::size_t r = 0; r < rows; ++r) {
    b.t.push_back(rng.uniform_int(1, 1000));
    b.c.push_back(with_null && r % 3 == 2 ? kNullCondition : rng.uniform_int(0, num_conditions - 1));
  }
  return b;
}

TEST(NoiseSchedule, EndpointsAndDirectProduct) {
  const auto s = NoiseSchedule::linear(1000);
  EXPECT_EQ(s.alpha_bar(0), 1.0);
  EXPECT_DOUBLE_EQ(s.alpha_bar(1), 0.9999);
  double prod = 1.0;
  for (int t = 1; t <= 1000; ++t) prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) / 999.0);
  EXPECT_NEAR(s.alpha_bar(1000), prod, 1e-18);
  EXPECT_LT(s.alpha_bar(1000), 1e-4);
  EXPECT_THROW(s.alpha_bar(1001), std::out_of_range);
}

TEST(NoiseSchedule, MonotoneAndVariancePreserving) {
  const auto s = NoiseSchedule::linear(1000);
  for (int t = 1; t <= 1000; ++t) {
    EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
    EXPECT_NEAR(s.signal(t) * s.signal(t) + s.noise(t) * s.noise(t), 1.0, 1e-15);
  }
}

TEST(ForwardDiffuse, Examples) {
  const auto s = NoiseSchedule::linear(1000);
  const Tensor x0 = Tensor::vector({0.3, -1.2});
  EXPECT_EQ(forward_diffuse(x0, 0, Tensor::vector({5, 5}), s), x0);
  EXPECT_THROW(forward_diffuse(x0, 1001, x0, s), std::out_of_range);
  EXPECT_THROW(forward_diffuse(x0, 10, Tensor::vector({1}), s), ShapeError);

  // Pick the timestep whose alpha_bar is closest to 0.25 and check the formula there.
  int t = 1;
  for (int k = 1; k <= 1000; ++k) {
    if (std::abs(s.alpha_bar(k) - 0.25) < std::abs(s.alpha_bar(t) - 0.25)) t = k;
  }
  const Tensor out = forward_diffuse(Tensor::vector({2, 0}), t, Tensor::vector({0, 2}), s);
  EXPECT_DOUBLE_EQ(out[0], 2 * std::sqrt(s.alpha_bar(t)));
  EXPECT_DOUBLE_EQ(out[1], 2 * std::sqrt(1 - s.alpha_bar(t)));
  EXPECT_NEAR(out[0], 1.0, 2e-3);
  EXPECT_NEAR(out[1], std::sqrt(3.0), 2e-3);
}

TEST(ForwardDiffuse, UnitVarianceMonteCarlo) {
  const auto s = NoiseSchedule::linear(1000);
  Rng rng(5);
  const int n = 100000;
  for (int t : {10, 300, 900}) {
    Tensor x0 = normal_tensor(Shape{static_cast<std::size_t>(n), 2}, rng);
    Tensor eps = normal_tensor(Shape{static_cast<std::size_t>(n), 2}, rng);
    Tensor x = forward_diffuse(x0, t, eps, s);
    double sum = 0, sq = 0;
    for (int i = 0; i < n; ++i) {
      sum += x[2 * i];
      sq += x[2 * i] * x[2 * i];
    }
    const double var = sq / n - (sum / n) * (sum / n);
    EXPECT_NEAR(var, 1.0, 0.02) << t;
  }
}

TEST(DmLoss, OracleStubIsZeroAndZeroModelIsDim) {
  const auto s = NoiseSchedule::linear(1000);
  Rng rng(9);
  const std::size_t n = 10000;
  const Tensor x0 = normal_tensor(Shape{n, 2}, rng);
  const Tensor eps = normal_tensor(Shape{n, 2}, rng);
  std::vector<int> c(n, 0), t(n);
  for (auto& v : t) v = rng.uniform_int(1, 1000);

  nd::Tape tape;
  EXPECT_EQ(tape.value(record_dm_loss(tape, FixedDenoiser(eps), x0, c, t, eps, s, false)).item(), 0.0);

  const double zero_loss = dm_loss(FixedDenoiser(Tensor(Shape{n, 2})), x0, c, t, s, rng);
  EXPECT_NEAR(zero_loss, 2.0, 0.05);
}

TEST(Guidance, ConstantStubArithmetic) {
  const ConstantDenoiser stub(Tensor::vector({1, 0}), Tensor::vector({0, 1}), Tensor::vector({1, -1}));
  Batch b{Tensor(Shape{1, 2}), {10}, {0}};

  auto cfg2 = cfg_predict(stub, b, 2.0);
  EXPECT_EQ(cfg2.eps, Tensor::matrix(1, 2, {3, -2}));
  EXPECT_EQ(cfg2.evaluations, 2);

  auto cfg0 = cfg_predict(stub, b, 0.0);
  EXPECT_EQ(cfg0.eps, Tensor::matrix(1, 2, {1, 0}));
  EXPECT_EQ(cfg0.evaluations, 1);

  auto g = guided_predict(stub, b, {1.0, 0.5});
  EXPECT_EQ(g.eps, Tensor::matrix(1, 2, {2, -0.5}));
  EXPECT_EQ(g.evaluations, 3);

  const ConstantDenoiser pstub(Tensor::vector({1, 1}), Tensor::vector({9, 9}), Tensor::vector({0, 1}));
  EXPECT_EQ(perturbation_predict(pstub, b).eps, Tensor::matrix(1, 2, {1, 0}));
}

TEST(Guidance, DisabledTermsAreBitIdentical) {
  Rng rng(3);
  EpsModel model(small_config(), rng);
  Batch b = random_batch(7, 3, rng, false);
  const Tensor plain = model.predict(b);
  EXPECT_TRUE(nd::bit_identical(cfg_predict(model, b, 0.0).eps, plain));
  const auto off = guided_predict(model, b, {0.0, 0.0});
  EXPECT_TRUE(nd::bit_identical(off.eps, plain));
  EXPECT_EQ(off.evaluations, 1);
  EXPECT_TRUE(nd::bit_identical(guided_predict(model, b, {1.5, 0.0}).eps, cfg_predict(model, b, 1.5).eps));

  const Tensor uncond = model.predict(Batch{b.x_t, b.t, std::vector<int>(b.rows(), kNullCondition)});
  const Tensor one = cfg_predict(model, b, 1.0).eps;
  for (std::size_t i = 0; i < one.size(); ++i) EXPECT_DOUBLE_EQ(one[i], 2 * plain[i] - uncond[i]);
}

TEST(Guidance, IdentitySkipLayerGivesZeroPerturbation) {
  Rng rng(4);
  EpsModel model(small_config(), rng);
  model.params().value("hidden1.weight").fill(0.0);
  model.params().value("hidden1.bias").fill(0.0);
  Batch b = random_batch(5, 3, rng);
  const Prediction diff = perturbation_predict(model, b);
  for (double v : diff.eps.data()) EXPECT_EQ(v, 0.0);
}

TEST(Guidance, PerturbationBranchGradients) {
  Rng rng(6);
  EpsModel model(small_config(), rng);
  const Batch b = random_batch(4, 3, rng);
  auto loss = [&](nd::Tape& t) {
    nd::Var d = nd::sub(t, model.record(t, b, Pass::normal, true), model.record(t, b, Pass::skip, true));
    return t.sum(t.square(d));
  };
  model.params().zero_grad();
  nd::forward_backward(model.params(), loss);
  double worst = 0.0;
  for (auto& e : model.params()) {
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const double keep = e.value[i];
      e.value[i] = keep + 1e-5;
      nd::Tape tp;
      const double up = tp.value(loss(tp)).item();
      e.value[i] = keep - 1e-5;
      nd::Tape tm;
      const double down = tm.value(loss(tm)).item();
      e.value[i] = keep;
      const double numeric = (up - down) / 2e-5;
      worst = std::max(worst, std::abs(numeric - e.grad[i]) / std::max(1.0, std::abs(numeric)));
    }
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(EpsModel, ParameterRoundTripAndValidation) {
  Rng rng(8);
  EpsModel model(small_config(), rng);
  EpsModel back = EpsModel::from_params(model.params());
  Batch b = random_batch(5, 3, rng);
  EXPECT_TRUE(nd::bit_identical(model.predict(b), back.predict(b)));
  EXPECT_THROW(EpsModel(EpsModelConfig{}, model.params()), ConfigError);
  EpsModelConfig bad = small_config();
  bad.skip_layer = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(InferenceGrid, Examples) {
  EXPECT_EQ(build_inference_grid(2, 1.0, 1000).steps, (std::vector<int>{1000, 500}));
  EXPECT_EQ(build_inference_grid(4, 3.0, 1000).steps, (std::vector<int>{1000, 900, 750, 500}));
  const auto g = build_inference_grid(20, 5.0, 1000);
  ASSERT_EQ(g.size(), 20u);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double sigma = static_cast<double>(20 - i) / 20;
    EXPECT_EQ(g.steps[i], static_cast<int>(std::floor(5 * sigma / (1 + 4 * sigma) * 1000 + 0.5)));
    if (i > 0) {
      EXPECT_LT(g.steps[i], g.steps[i - 1]);
    }
    EXPECT_GE(g.steps[i], 0);
    EXPECT_LE(g.steps[i], 1000);
  }
  EXPECT_THROW(build_inference_grid(1, 1.0, 1000), ConfigError);
}

TEST(Ddim, SingleStepWithTrueNoiseRecoversX0) {
  const auto s = NoiseSchedule::linear(1000);
  Rng rng(12);
  const Tensor x0 = normal_tensor(Shape{4, 2}, rng);
  const Tensor eps = normal_tensor(Shape{4, 2}, rng);
  for (int t : {1, 250, 999}) {
    const Tensor back = ddim_step(forward_diffuse(x0, t, eps, s), eps, t, std::nullopt, s);
    for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_NEAR(back[i], x0[i], 1e-12);
  }
}

TEST(SampleReverse, PointMassLandsOnTargetsAndCountsEvaluations) {
  const auto s = NoiseSchedule::linear(1000);
  const Tensor targets = Tensor::matrix(2, 2, {1.5, -0.5, -2.0, 0.25});
  const PointMassDenoiser model(targets, s);
  const auto grid = build_inference_grid(10, 3.0, 1000);
  const std::vector<int> conds = {0, 1, 1};

  const auto plain = sample_reverse(model, conds, grid, s, std::nullopt, 42);
  EXPECT_EQ(plain.nfe, static_cast<int>(grid.size()));
  for (std::size_t r = 0; r < conds.size(); ++r) {
    EXPECT_NEAR(plain.x0.at(r, 0), targets.at(conds[r], 0), 1e-9);
    EXPECT_NEAR(plain.x0.at(r, 1), targets.at(conds[r], 1), 1e-9);
  }
  EXPECT_EQ(sample_reverse(model, conds, grid, s, GuidanceConfig{1.0, 0.1}, 42).nfe, 3 * static_cast<int>(grid.size()));
  EXPECT_EQ(sample_reverse(model, conds, grid, s, GuidanceConfig{1.0, 0.0}, 42).nfe, 2 * static_cast<int>(grid.size()));
  EXPECT_EQ(sample_reverse(model, conds, grid, s, GuidanceConfig{0.0, 0.0}, 42).nfe, static_cast<int>(grid.size()));
}

TEST(SampleReverse, Deterministic) {
  const auto s = NoiseSchedule::linear(1000);
  Rng rng(13);
  EpsModel model(small_config(), rng);
  const auto grid = build_inference_grid(8, 3.0, 1000);
  const std::vector<int> conds = {0, 1, 2, 0};
  const auto a = sample_reverse(model, conds, grid, s, GuidanceConfig{1.0, 0.1}, 7);
  const auto b = sample_reverse(model, conds, grid, s, GuidanceConfig{1.0, 0.1}, 7);
  EXPECT_TRUE(nd::bit_identical(a.x0, b.x0));
  EXPECT_EQ(a.nfe, b.nfe);
  EXPECT_FALSE(nd::bit_identical(a.x0, sample_reverse(model, conds, grid, s, GuidanceConfig{1.0, 0.1}, 8).x0));
}

TEST(SampleReverse, NonFiniteReportsStepIndex) {
  const auto s = NoiseSchedule::linear(1000);
  const FixedDenoiser huge(Tensor(Shape{1, 2}, 1e308));
  const auto grid = build_inference_grid(5, 1.0, 1000);
  const std::vector<int> conds = {0};
  try {
    sample_reverse(huge, conds, grid, s, std::nullopt, 1);
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_LT(e.index(), grid.size());
  }
}

}  // namespace
}  // namespace diffapo::diffusion

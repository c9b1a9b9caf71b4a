// Copyright 2026 The diffapo Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "diffapo/apo.hpp"
#include "diffapo/timestep_shift.hpp"
#include "stubs.hpp"

namespace diffapo::apo {
namespace {

using diffusion::Batch;
using diffusion::EpsModel;
using diffusion::EpsModelConfig;
using diffusion::NoiseSchedule;
using nd::Shape;
using nd::Tensor;

// Straight-line evaluation of s*sigma / (1 + (s-1)*sigma).
double shift_ref(double sigma, double s) { return s * sigma / (1.0 + (s - 1.0) * sigma); }

EpsModel small_model(std::uint64_t seed) {
  EpsModelConfig cfg;
  cfg.num_conditions = 4;
  cfg.time_dim = 4;
  cfg.cond_dim = 3;
  cfg.hidden = 8;
  Rng rng(seed);
  return EpsModel(cfg, rng);
}

PreferencePair make_pair(int c, double cx, double cy, double rx, double ry) {
  return {c, Tensor::vector({cx, cy}), Tensor::vector({rx, ry}), PairSource::offline};
}

TEST(Shift, Examples) {
  for (double s : {0.5, 1.0, 3.0, 6.0}) {
    EXPECT_EQ(shift_sigma(0.0, s), 0.0);
    EXPECT_EQ(shift_sigma(1.0, s), 1.0);
  }
  EXPECT_DOUBLE_EQ(shift_sigma(0.5, 3.0), 0.75);
  EXPECT_NEAR(shift_sigma(0.25, 4.0), 1.0 / 1.75, 1e-15);
  EXPECT_THROW(shift_sigma(1.5, 3.0), std::invalid_argument);
  EXPECT_THROW(shift_sigma(0.5, 0.0), std::invalid_argument);
}

TEST(Shift, MonotoneInvertibleAndComposes) {
  for (int i = 1; i < 100; ++i) {
    const double sigma = i / 100.0;
    for (double a : {1.5, 3.0, 4.0}) {
      EXPECT_NEAR(shift_sigma(sigma, a), shift_ref(sigma, a), 1e-15);
      EXPECT_LT(shift_sigma(sigma - 0.005, a), shift_sigma(sigma, a));
      EXPECT_LT(shift_sigma(sigma, a), shift_sigma(sigma, a + 0.5));
      EXPECT_NEAR(unshift_sigma(shift_sigma(sigma, a), a), sigma, 1e-14);
      for (double b : {2.0, 5.0}) EXPECT_NEAR(shift_sigma(shift_sigma(sigma, a), b), shift_sigma(sigma, a * b), 1e-14);
    }
  }
}

TEST(Shift, AnchorExamplesAndRounding) {
  EXPECT_EQ(anchor_timestep(0.5, 3.0, 1000), 750);
  EXPECT_EQ(anchor_timestep(1.0, 5.0, 1000), 1000);
  EXPECT_EQ(anchor_timestep(0.1, 6.0, 1000), 400);
  EXPECT_EQ(round_half_up(2.5), 3);
  EXPECT_EQ(round_half_up(-2.5), -2);
  EXPECT_EQ(round_half_up(2.4999), 2);
}

TEST(PerturbTimestep, ZeroGammaAndClipping) {
  Rng rng(1);
  EXPECT_EQ(perturb_timestep(500, 0.0, 1000, rng), 500);
  bool hit_top = false;
  for (int i = 0; i < 2000; ++i) {
    const int t = perturb_timestep(998, 5.0, 1000, rng);
    EXPECT_LE(t, 1000);
    hit_top = hit_top || t == 1000;
    EXPECT_GE(perturb_timestep(1, 5.0, 1000, rng), 0);
  }
  EXPECT_TRUE(hit_top);
}

TEST(PerturbTimestep, OffsetStandardDeviation) {
  Rng rng(2);
  const int n = 100000;
  double sum = 0, sq = 0;
  for (int i = 0; i < n; ++i) {
    const double d = perturb_timestep(500, 5.0, 1000, rng) - 500;
    sum += d;
    sq += d * d;
  }
  const double sd = std::sqrt(sq / n - (sum / n) * (sum / n));
  EXPECT_GE(sd, 4.8);
  EXPECT_LE(sd, 5.2);
}

TEST(Window, DefaultQuota) {
  SamplerConfig cfg;
  Rng rng(3);
  for (int i = 0; i < 20000; ++i) {
    const WindowDraw w = draw_window(cfg, rng);
    ASSERT_EQ(w.size(), 5u);
    EXPECT_EQ(std::count_if(w.timesteps.begin(), w.timesteps.end(), [](int t) { return t >= 800; }), 4);
    for (std::size_t k = 0; k < w.size(); ++k) {
      EXPECT_EQ(w.regimes[k], k < 4 ? Regime::high : Regime::low);
      EXPECT_GE(w.timesteps[k], 0);
      EXPECT_LE(w.timesteps[k], 1000);
    }
  }
}

TEST(Window, ForcedSigma) {
  SamplerConfig cfg;
  cfg.gamma = 0.0;
  cfg.shift_set = {1.0};
  cfg.n_high = 1;
  cfg.n_low = 0;
  Rng rng(4);
  const double sigma[] = {1.0};
  EXPECT_EQ(build_window(cfg, 1.0, sigma, rng).timesteps, std::vector<int>{1000});
  const double wrong[] = {0.5};
  EXPECT_THROW(build_window(cfg, 1.0, wrong, rng), std::invalid_argument);
}

TEST(Window, HighAnchorsMatchPushforward) {
  SamplerConfig cfg;
  Rng rng(5);
  std::vector<int> counts(1001, 0);
  std::size_t n = 0;
  for (int i = 0; i < 10000; ++i) {
    const WindowDraw w = draw_window(cfg, rng);
    for (std::size_t k = 0; k < w.size(); ++k) {
      if (w.regimes[k] == Regime::high) {
        ++counts[static_cast<std::size_t>(w.anchors[k])];
        ++n;
      }
    }
  }
  // P(anchor <= k) = P(shift(sigma) < (k + 0.5) / T), mixed over the shift set.
  auto cdf = [&](int k) {
    const double y = std::min(1.0, (k + 0.5) / 1000.0);
    double p = 0.0;
    for (double s : cfg.shift_set) {
      const double sigma = y / (s - (s - 1.0) * y);
      p += std::clamp((sigma - 0.8) / 0.2, 0.0, 1.0);
    }
    return p / static_cast<double>(cfg.shift_set.size());
  };
  double ks = 0.0, acc = 0.0;
  for (int k = 0; k <= 1000; ++k) {
    acc += counts[static_cast<std::size_t>(k)];
    ks = std::max(ks, std::abs(acc / static_cast<double>(n) - cdf(k)));
  }
  EXPECT_LT(ks, 0.02);
}

TEST(TimestepSampler, ShiftRefreshedEveryStride) {
  SamplerConfig cfg;
  cfg.shift_set = {3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0};
  TimestepSampler sampler(cfg, TimestepMode::apo);
  Rng rng(6);
  int changes = 0;
  double last = 0.0;
  for (int i = 0; i < 400; ++i) {
    const double s = sampler.next(rng).shift;
    if (i % cfg.stride != 0) {
      EXPECT_EQ(s, last);
    } else if (s != last) {
      ++changes;
    }
    last = s;
  }
  EXPECT_GT(changes, 50);
}

TEST(TimestepSampler, UniformModeIsPlainUniform) {
  TimestepSampler sampler(SamplerConfig{}, TimestepMode::uniform);
  Rng rng(7);
  int high = 0, total = 0;
  for (int i = 0; i < 20000; ++i) {
    const WindowDraw w = sampler.next(rng);
    ASSERT_EQ(w.size(), 5u);
    EXPECT_EQ(w.timesteps, w.anchors);
    for (int t : w.timesteps) {
      EXPECT_GE(t, 1);
      EXPECT_LE(t, 1000);
      high += t >= 800;
      ++total;
    }
  }
  EXPECT_NEAR(static_cast<double>(high) / total, 0.201, 0.01);
}

TEST(DpoLoss, IdenticalPolicyGivesLn2) {
  const auto sched = NoiseSchedule::linear(1000);
  const EpsModel policy = small_model(8);
  const EpsModel reference = policy;
  Rng rng(9);
  for (int i = 0; i < 20; ++i) {
    const auto pair = make_pair(rng.uniform_int(0, 3), rng.normal(), rng.normal(), rng.normal(), rng.normal());
    const double beta = rng.uniform(0.1, 5000.0);
    const double loss = dpo_pair_loss(policy, reference, pair, rng.uniform_int(0, 1000), beta, sched, rng);
    EXPECT_NEAR(loss, std::log(2.0), 1e-12);
  }
}

TEST(DpoLoss, KnownResiduals) {
  const auto sched = NoiseSchedule::linear(1000);
  const WindowNoise noise{Tensor::matrix(1, 2, {0.3, -0.7}), Tensor::matrix(1, 2, {1.1, 0.4})};
  // Rows are (chosen, rejected). Chosen: policy exact, reference off by one -> Delta_w = -1.
  // Rejected: policy off by one, reference exact -> Delta_l = +1.
  const testing::FixedDenoiser policy(Tensor::matrix(2, 2, {0.3, -0.7, 2.1, 0.4}));
  const testing::FixedDenoiser reference(Tensor::matrix(2, 2, {1.3, -0.7, 1.1, 0.4}));
  nd::Tape tape;
  const int t[] = {400};
  const auto loss = record_window_loss(tape, policy, reference, make_pair(0, 1, 1, 2, 2), t, noise, 1.0, sched);
  EXPECT_NEAR(tape.value(loss.total).item(), 0.126928011042972, 1e-12);
  EXPECT_DOUBLE_EQ(tape.value(loss.margins).item(), 2.0);
}

// eps_hat = a * x_t + b * t / T + c with three scalar parameters.
class LinearDenoiser final : public diffusion::Denoiser {
 public:
  LinearDenoiser(double a, double b, double c) {
    params_.add("a", Tensor::scalar(a));
    params_.add("b", Tensor::scalar(b));
    params_.add("c", Tensor::scalar(c));
  }
  nd::Var record(nd::Tape& tape, const Batch& batch, diffusion::Pass, bool trainable) const override {
    Tensor tt(batch.x_t.shape());
    for (std::size_t r = 0; r < batch.rows(); ++r) {
      for (std::size_t j = 0; j < tt.dim(1); ++j) tt.at(r, j) = batch.t[r] / 1000.0;
    }
    nd::Var ax = tape.mul(tape.constant(batch.x_t), tape.param(params_, 0, trainable));
    nd::Var bt = tape.mul(tape.constant(std::move(tt)), tape.param(params_, 1, trainable));
    return tape.add(tape.add(ax, bt), tape.param(params_, 2, trainable));
  }
  nd::ParamSet& params() override { return params_; }
  const nd::ParamSet& params() const override { return params_; }
  std::unique_ptr<diffusion::Denoiser> clone() const override { return std::make_unique<LinearDenoiser>(*this); }

 private:
  nd::ParamSet params_;
};

TEST(DpoLoss, MatchesStraightLineReimplementation) {
  const auto sched = NoiseSchedule::linear(1000);
  const double pa = 0.4, pb = -0.3, pc = 0.2, ra = 0.1, rb = 0.5, rc = -0.25;
  const LinearDenoiser policy(pa, pb, pc), reference(ra, rb, rc);
  Rng rng(10);
  for (int trial = 0; trial < 10; ++trial) {
    const auto pair = make_pair(1, rng.normal(), rng.normal(), rng.normal(), rng.normal());
    const std::vector<int> ts = {rng.uniform_int(0, 1000), rng.uniform_int(0, 1000), rng.uniform_int(0, 1000)};
    const double beta = rng.uniform(0.5, 3.0);
    const WindowNoise noise = draw_window_noise(ts.size(), 2, rng);

    double expected = 0.0;
    for (std::size_t k = 0; k < ts.size(); ++k) {
      const double ab = sched.alpha_bar(ts[k]);
      auto delta = [&](const Tensor& x0, const Tensor& eps_rows) {
        double ep = 0.0, er = 0.0;
        for (std::size_t j = 0; j < 2; ++j) {
          const double e = eps_rows.at(k, j);
          const double xt = std::sqrt(ab) * x0[j] + std::sqrt(1.0 - ab) * e;
          const double pol = pa * xt + pb * ts[k] / 1000.0 + pc;
          const double ref = ra * xt + rb * ts[k] / 1000.0 + rc;
          ep += (e - pol) * (e - pol);
          er += (e - ref) * (e - ref);
        }
        return ep - er;
      };
      const double margin = delta(pair.rejected, noise.rejected) - delta(pair.chosen, noise.chosen);
      expected += -std::log(1.0 / (1.0 + std::exp(-beta * margin)));
    }
    nd::Tape tape;
    const auto loss = record_window_loss(tape, policy, reference, pair, ts, noise, beta, sched);
    EXPECT_NEAR(tape.value(loss.total).item(), expected, 1e-12);
  }
}

TEST(WindowStep, RepeatedTimestepsWithIdenticalPolicy) {
  const auto sched = NoiseSchedule::linear(1000);
  EpsModel policy = small_model(11);
  const EpsModel reference = policy;
  WindowDraw w;
  w.timesteps = {300, 300, 300, 300, 300};
  nd::AdamW opt;
  Rng rng(12);
  const auto r = apo_window_step(policy, reference, make_pair(2, 1, 0, -1, 0.5), w, 1.0, sched, opt, rng);
  EXPECT_TRUE(r.applied);
  EXPECT_NEAR(r.loss_total, 5 * std::log(2.0), 1e-12);
  EXPECT_EQ(opt.step_count(), 1);
}

TEST(WindowStep, GradientIsSumOfPerTimestepGradients) {
  const auto sched = NoiseSchedule::linear(1000);
  EpsModel policy = small_model(13);
  const EpsModel reference = small_model(14);
  const auto pair = make_pair(1, 0.5, 1.5, -1.0, 0.2);
  const std::vector<int> ts = {950, 870, 820, 990, 120};
  Rng rng(15);
  const WindowNoise noise = draw_window_noise(ts.size(), 2, rng);

  policy.params().zero_grad();
  {
    nd::Tape tape;
    tape.backward(record_window_loss(tape, policy, reference, pair, ts, noise, 2.0, sched).total, &policy.params());
  }
  const nd::ParamSet joint = policy.params();

  policy.params().zero_grad();
  for (std::size_t k = 0; k < ts.size(); ++k) {
    WindowNoise one{Tensor(Shape{1, 2}), Tensor(Shape{1, 2})};
    for (std::size_t j = 0; j < 2; ++j) {
      one.chosen.at(0, j) = noise.chosen.at(k, j);
      one.rejected.at(0, j) = noise.rejected.at(k, j);
    }
    nd::Tape tape;
    const int t[] = {ts[k]};
    tape.backward(record_window_loss(tape, policy, reference, pair, t, one, 2.0, sched).total, &policy.params());
  }
  for (std::size_t e = 0; e < joint.size(); ++e) {
    for (std::size_t i = 0; i < joint[e].grad.size(); ++i) {
      EXPECT_NEAR(joint[e].grad[i], policy.params()[e].grad[i], 1e-12) << joint[e].name;
    }
  }
}

TEST(WindowStep, OneStepDecreasesLossAtFixedDraws) {
  const auto sched = NoiseSchedule::linear(1000);
  EpsModel policy = small_model(16);
  const EpsModel reference = policy;
  const auto pair = make_pair(0, 2.0, 0.0, 0.0, 0.5);
  Rng rng(17);
  WindowDraw w = draw_window(SamplerConfig{}, rng);
  const WindowNoise noise = draw_window_noise(w.size(), 2, rng);
  nd::AdamW opt({1e-4});
  const auto r = apo_window_step(policy, reference, pair, w, noise, 1.0, sched, opt);
  ASSERT_TRUE(r.applied);
  nd::Tape tape;
  const double after = tape.value(record_window_loss(tape, policy, reference, pair, w.timesteps, noise, 1.0, sched).total).item();
  EXPECT_LT(after, r.loss_total);
}

TEST(WindowStep, ReferenceStaysFrozen) {
  const auto sched = NoiseSchedule::linear(1000);
  EpsModel policy = small_model(18);
  const EpsModel reference = policy;
  const nd::ParamSet before = reference.params();
  nd::AdamW opt({1e-3});
  TimestepSampler sampler(SamplerConfig{}, TimestepMode::apo);
  Rng rng(19);
  for (int i = 0; i < 30; ++i) {
    const auto pair = make_pair(i % 4, rng.normal(), rng.normal(), rng.normal(), rng.normal());
    apo_window_step(policy, reference, pair, sampler.next(rng), 1.0, sched, opt, rng);
  }
  EXPECT_TRUE(reference.params().values_identical(before));
  EXPECT_FALSE(policy.params().values_identical(before));
}

TEST(WindowStep, NonFiniteLossAbortsWithoutUpdate) {
  const auto sched = NoiseSchedule::linear(1000);
  EpsModel policy = small_model(20);
  const EpsModel reference = policy;
  const nd::ParamSet before = policy.params();
  nd::AdamW opt({1e-3});
  WindowDraw w;
  w.timesteps = {500};
  const WindowNoise noise{Tensor::matrix(1, 2, {1e200, 0}), Tensor::matrix(1, 2, {0, 0})};
  const auto r = apo_window_step(policy, reference, make_pair(0, 0, 0, 1, 1), w, noise, 1.0, sched, opt);
  EXPECT_FALSE(r.applied);
  EXPECT_FALSE(r.event.empty());
  EXPECT_TRUE(policy.params().values_identical(before));
  EXPECT_EQ(opt.step_count(), 0);
}

TEST(PairSource, Tags) {
  for (auto s : {PairSource::online, PairSource::half_online, PairSource::offline}) {
    EXPECT_EQ(pair_source_from_tag(pair_source_tag(s)), s);
  }
  EXPECT_THROW(pair_source_from_tag("XX"), std::invalid_argument);
}

}  // namespace
}  // namespace diffapo::apo

// Copyright 2026 The diffapo Authors
// SPDX-License-Identifier: Apache-2.0

#include "diffapo/apo.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace diffapo::apo {

using diffusion::Batch;
using diffusion::Denoiser;
using diffusion::NoiseSchedule;
using nd::Shape;
using nd::Tape;
using nd::Tensor;
using nd::Var;

void SamplerConfig::validate() const {
  if (shift_set.empty()) throw ConfigError("sampler: shift_set must be nonempty");
  for (double s : shift_set) {
    if (!(s > 0.0) || !std::isfinite(s)) throw ConfigError("sampler: shifts must be finite and > 0");
  }
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw ConfigError("sampler: gamma must be finite and >= 0");
  if (!(high_threshold > 0.0 && high_threshold < 1.0)) throw ConfigError("sampler: high_threshold must be in (0,1)");
  if (n_high < 0 || n_low < 0 || n_high + n_low < 1) throw ConfigError("sampler: window needs n_high + n_low >= 1");
  if (stride < 1) throw ConfigError("sampler: stride must be >= 1");
  if (T < 2) throw ConfigError("sampler: T must be >= 2");
  if (high_start() < 1 || high_start() > T) throw ConfigError("sampler: both regimes must be nonempty");
}

int SamplerConfig::high_start() const {
  return static_cast<int>(round_half_up(high_threshold * static_cast<double>(T)));
}

int perturb_timestep(int t, double gamma, int T, Rng& rng) {
  if (t < 0 || t > T) throw std::out_of_range("perturb_timestep: t outside [0, T]");
  if (gamma == 0.0) return t;
  const double z = rng.normal();
  return static_cast<int>(std::clamp<long>(round_half_up(static_cast<double>(t) + gamma * z), 0, T));
}

WindowDraw build_window(const SamplerConfig& cfg, double s, std::span<const double> sigmas, Rng& rng) {
  const std::size_t k = static_cast<std::size_t>(cfg.window_size());
  if (sigmas.size() != k) throw std::invalid_argument("build_window: expected one sigma per slot");
  const int hs = cfg.high_start();
  WindowDraw w;
  w.shift = s;
  for (std::size_t i = 0; i < k; ++i) {
    const bool high = i < static_cast<std::size_t>(cfg.n_high);
    const double sigma = sigmas[i];
    if (high ? sigma < cfg.high_threshold : sigma >= cfg.high_threshold) {
      throw std::invalid_argument("build_window: sigma outside its regime");
    }
    const int anchor = anchor_timestep(sigma, s, cfg.T);
    const int t = perturb_timestep(anchor, cfg.gamma, cfg.T, rng);
    w.anchors.push_back(anchor);
    w.timesteps.push_back(high ? std::clamp(t, hs, cfg.T) : std::clamp(t, 0, hs - 1));
    w.regimes.push_back(high ? Regime::high : Regime::low);
  }
  return w;
}

namespace {

double pick_shift(const SamplerConfig& cfg, Rng& rng) {
  return cfg.shift_set[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(cfg.shift_set.size()) - 1))];
}

WindowDraw window_with_shift(const SamplerConfig& cfg, double s, Rng& rng) {
  std::vector<double> sigmas;
  for (int i = 0; i < cfg.n_high; ++i) sigmas.push_back(rng.uniform(cfg.high_threshold, 1.0));
  for (int i = 0; i < cfg.n_low; ++i) sigmas.push_back(rng.uniform(0.0, cfg.high_threshold));
  return build_window(cfg, s, sigmas, rng);
}

}  // namespace

WindowDraw draw_window(const SamplerConfig& cfg, Rng& rng) {
  const double s = pick_shift(cfg, rng);
  return window_with_shift(cfg, s, rng);
}

WindowDraw draw_uniform_window(int k, int T, double high_threshold, Rng& rng) {
  const long hs = round_half_up(high_threshold * static_cast<double>(T));
  WindowDraw w;
  for (int i = 0; i < k; ++i) {
    const int t = rng.uniform_int(1, T);
    w.timesteps.push_back(t);
    w.anchors.push_back(t);
    w.regimes.push_back(t >= hs ? Regime::high : Regime::low);
  }
  return w;
}

TimestepSampler::TimestepSampler(SamplerConfig cfg, TimestepMode mode) : cfg_(std::move(cfg)), mode_(mode) {
  cfg_.validate();
}

WindowDraw TimestepSampler::next(Rng& rng) {
  if (mode_ == TimestepMode::uniform) {
    ++drawn_;
    return draw_uniform_window(cfg_.window_size(), cfg_.T, cfg_.high_threshold, rng);
  }
  if (drawn_ % static_cast<std::uint64_t>(cfg_.stride) == 0) shift_ = pick_shift(cfg_, rng);
  ++drawn_;
  return window_with_shift(cfg_, shift_, rng);
}

// ---------------------------------------------------------------------------

std::string to_string(PairSource source) {
  switch (source) {
    case PairSource::online: return "online";
    case PairSource::half_online: return "half_online";
    case PairSource::offline: return "offline";
  }
  return "?";
}

std::string pair_source_tag(PairSource source) {
  switch (source) {
    case PairSource::online: return "ON";
    case PairSource::half_online: return "HO";
    case PairSource::offline: return "OF";
  }
  return "?";
}

PairSource pair_source_from_tag(const std::string& tag) {
  if (tag == "ON") return PairSource::online;
  if (tag == "HO") return PairSource::half_online;
  if (tag == "OF") return PairSource::offline;
  throw std::invalid_argument("unknown pair source tag '" + tag + "'");
}

WindowNoise draw_window_noise(std::size_t k, std::size_t dim, Rng& rng) {
  WindowNoise noise{Tensor(Shape{k, dim}), Tensor(Shape{k, dim})};
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < dim; ++j) noise.chosen.at(i, j) = rng.normal();
    for (std::size_t j = 0; j < dim; ++j) noise.rejected.at(i, j) = rng.normal();
  }
  return noise;
}

WindowLoss record_window_loss(Tape& tape, const Denoiser& policy, const Denoiser& reference,
                              const PreferencePair& pair, std::span<const int> timesteps, const WindowNoise& noise,
                              double beta, const NoiseSchedule& sched) {
  if (pair.chosen.rank() != 1 || pair.chosen.shape() != pair.rejected.shape()) {
    throw ShapeError("window_loss", "chosen " + nd::shape_string(pair.chosen.shape()) + " vs rejected " +
                                        nd::shape_string(pair.rejected.shape()));
  }
  const std::size_t k = timesteps.size();
  const std::size_t d = pair.chosen.size();
  if (k == 0) throw ShapeError("window_loss", "empty window");
  const Shape noise_shape{k, d};
  if (noise.chosen.shape() != noise_shape || noise.rejected.shape() != noise_shape) {
    throw ShapeError("window_loss", "noise must be " + nd::shape_string(noise_shape));
  }

  Tensor x0(Shape{2 * k, d});
  Tensor eps(Shape{2 * k, d});
  std::vector<int> rows_t(2 * k);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      x0.at(2 * i, j) = pair.chosen[j];
      x0.at(2 * i + 1, j) = pair.rejected[j];
      eps.at(2 * i, j) = noise.chosen.at(i, j);
      eps.at(2 * i + 1, j) = noise.rejected.at(i, j);
    }
    rows_t[2 * i] = rows_t[2 * i + 1] = timesteps[i];
  }
  Batch batch{diffusion::forward_diffuse_rows(x0, rows_t, eps, sched), rows_t,
              std::vector<int>(2 * k, pair.condition)};

  Var eps_v = tape.constant(eps);
  Var pol = policy.record(tape, batch, diffusion::Pass::normal, true);
  Var ref = reference.record(tape, batch, diffusion::Pass::normal, false);
  Var err_pol = nd::row_sum(tape, tape.square(nd::sub(tape, eps_v, pol)));
  Var err_ref = nd::row_sum(tape, tape.square(nd::sub(tape, eps_v, ref)));
  Var delta = nd::sub(tape, err_pol, err_ref);

  // margin_k = Delta_l(k) - Delta_w(k)
  Tensor select(Shape{k, 2 * k});
  for (std::size_t i = 0; i < k; ++i) {
    select.at(i, 2 * i) = -1.0;
    select.at(i, 2 * i + 1) = 1.0;
  }
  Var margins = tape.matmul(tape.constant(std::move(select)), delta);
  Var losses = nd::neg(tape, tape.log(tape.sigmoid(nd::scale(tape, margins, beta))));
  return WindowLoss{tape.sum(losses), losses, margins};
}

double dpo_pair_loss(const Denoiser& policy, const Denoiser& reference, const PreferencePair& pair, int t,
                     double beta, const NoiseSchedule& sched, Rng& rng) {
  const WindowNoise noise = draw_window_noise(1, pair.chosen.size(), rng);
  Tape tape;
  const int ts[] = {t};
  return tape.value(record_window_loss(tape, policy, reference, pair, ts, noise, beta, sched).total).item();
}

WindowStepResult apo_window_step(Denoiser& policy, const Denoiser& reference, const PreferencePair& pair,
                                 const WindowDraw& window, double beta, const NoiseSchedule& sched,
                                 nd::AdamW& optimizer, Rng& rng) {
  const WindowNoise noise = draw_window_noise(window.size(), pair.chosen.size(), rng);
  return apo_window_step(policy, reference, pair, window, noise, beta, sched, optimizer);
}

WindowStepResult apo_window_step(Denoiser& policy, const Denoiser& reference, const PreferencePair& pair,
                                 const WindowDraw& window, const WindowNoise& noise, double beta,
                                 const NoiseSchedule& sched, nd::AdamW& optimizer) {
  WindowStepResult result;
  nd::ParamSet& params = policy.params();
  params.zero_grad();
  try {
    Tape tape;
    const WindowLoss loss = record_window_loss(tape, policy, reference, pair, window.timesteps, noise, beta, sched);
    result.loss_total = tape.backward(loss.total, &params);
    const Tensor& margins = tape.value(loss.margins);
    double acc = 0.0;
    for (double m : margins.data()) acc += m;
    result.margin = acc / static_cast<double>(margins.size());
  } catch (const NonFiniteError& e) {
    params.zero_grad();
    result.event = e.what();
    return result;
  }
  for (const auto& entry : params) {
    if (!entry.grad.all_finite()) {
      params.zero_grad();
      result.event = "non-finite gradient in '" + entry.name + "'";
      return result;
    }
  }
  optimizer.step(params);
  result.applied = true;
  return result;
}

}  // namespace diffapo::apo

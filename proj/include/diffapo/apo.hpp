// Copyright 2026 The diffapo Authors
// SPDX-License-Identifier: Apache-2.0

// Trajectory-aware timestep sampling and the windowed preference loss.
//
// A window holds K = n_high + n_low timesteps. Each slot draws a noise level
// sigma from its regime, pushes it through the shift map (shift s shared by the
// window and redrawn every `stride` windows), rounds it to an anchor timestep,
// adds a Gaussian offset of std gamma and clips back into the regime. The
// preference loss is summed over the window and followed by a single optimizer
// step.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "diffapo/diffusion.hpp"
#include "diffapo/ndtensor.hpp"
#include "diffapo/optim.hpp"
#include "diffapo/rng.hpp"
#include "diffapo/timestep_shift.hpp"

namespace diffapo::apo {

struct SamplerConfig {
  std::vector<double> shift_set{3.0, 4.0, 5.0, 6.0};
  double gamma = 5.0;
  double high_threshold = 0.8;
  int n_high = 4;
  int n_low = 1;
  int stride = 4;
  int T = 1000;

  void validate() const;
  int window_size() const noexcept { return n_high + n_low; }
  /// First timestep of the high-noise regime, round(high_threshold * T).
  int high_start() const;
};

enum class Regime { high, low };
enum class TimestepMode { apo, uniform };

struct WindowDraw {
  std::vector<int> timesteps;
  std::vector<int> anchors;  ///< before the offset; equals timesteps when gamma == 0
  std::vector<Regime> regimes;
  double shift = 1.0;

  std::size_t size() const noexcept { return timesteps.size(); }
};

/// Clip(round(t + gamma * z), 0, T) with z ~ N(0, 1).
int perturb_timestep(int t, double gamma, int T, Rng& rng);

/// Maps explicit noise levels (n_high values in [threshold, 1] followed by
/// n_low values in [0, threshold)) to a window using shift `s`.
WindowDraw build_window(const SamplerConfig& cfg, double s, std::span<const double> sigmas, Rng& rng);

/// One window with a freshly drawn shift.
WindowDraw draw_window(const SamplerConfig& cfg, Rng& rng);

/// Baseline draws: `k` timesteps uniform on [1, T], tagged by regime.
WindowDraw draw_uniform_window(int k, int T, double high_threshold, Rng& rng);

/// Stateful window source. In apo mode the shift is redrawn every `stride`
/// windows; in uniform mode every window holds K uniform timesteps.
class TimestepSampler {
 public:
  TimestepSampler(SamplerConfig cfg, TimestepMode mode);

  WindowDraw next(Rng& rng);

  const SamplerConfig& config() const noexcept { return cfg_; }
  TimestepMode mode() const noexcept { return mode_; }

 private:
  SamplerConfig cfg_;
  TimestepMode mode_;
  double shift_ = 1.0;
  std::uint64_t drawn_ = 0;
};

// ---------------------------------------------------------------------------
// Preference loss

enum class PairSource { online, half_online, offline };

std::string to_string(PairSource source);
PairSource pair_source_from_tag(const std::string& tag);  // ON / HO / OF
std::string pair_source_tag(PairSource source);

struct PreferencePair {
  int condition = 0;
  nd::Tensor chosen;    ///< shape {dim}
  nd::Tensor rejected;  ///< shape {dim}
  PairSource source = PairSource::offline;
};

/// Per-timestep noise for chosen and rejected samples, K x dim each.
struct WindowNoise {
  nd::Tensor chosen;
  nd::Tensor rejected;
};

WindowNoise draw_window_noise(std::size_t k, std::size_t dim, Rng& rng);

struct WindowLoss {
  nd::Var total;    ///< scalar sum of per-timestep losses
  nd::Var losses;   ///< K x 1
  nd::Var margins;  ///< K x 1, Delta_l - Delta_w
};

/// Records sum_k -log sigmoid(beta * (Delta_l - Delta_w)) where
/// Delta = ||eps - eps_policy(x_t)||^2 - ||eps - eps_ref(x_t)||^2, chosen and
/// rejected corrupted to the same timestep with their own noise. Policy and
/// reference see identical inputs; only the policy is bound as trainable.
WindowLoss record_window_loss(nd::Tape& tape, const diffusion::Denoiser& policy, const diffusion::Denoiser& reference,
                              const PreferencePair& pair, std::span<const int> timesteps, const WindowNoise& noise,
                              double beta, const diffusion::NoiseSchedule& sched);

/// Single-timestep loss with fresh noise, value only.
double dpo_pair_loss(const diffusion::Denoiser& policy, const diffusion::Denoiser& reference,
                     const PreferencePair& pair, int t, double beta, const diffusion::NoiseSchedule& sched, Rng& rng);

struct WindowStepResult {
  double loss_total = 0.0;
  double margin = 0.0;  ///< mean over the window
  bool applied = false;
  std::string event;  ///< set when the window was aborted
};

/// Zeroes policy gradients, accumulates the window loss gradient, applies one
/// optimizer step. A non-finite loss or gradient aborts the window without
/// touching parameters.
WindowStepResult apo_window_step(diffusion::Denoiser& policy, const diffusion::Denoiser& reference,
                                 const PreferencePair& pair, const WindowDraw& window, double beta,
                                 const diffusion::NoiseSchedule& sched, nd::AdamW& optimizer, Rng& rng);

/// Same with caller-supplied noise.
WindowStepResult apo_window_step(diffusion::Denoiser& policy, const diffusion::Denoiser& reference,
                                 const PreferencePair& pair, const WindowDraw& window, const WindowNoise& noise,
                                 double beta, const diffusion::NoiseSchedule& sched, nd::AdamW& optimizer);

}  // namespace diffapo::apo

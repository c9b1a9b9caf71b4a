// Copyright 2026 The diffapo Authors
// SPDX-License-Identifier: Apache-2.0

// Noise schedule, forward corruption, the conditional epsilon-prediction
// network, composite guidance and deterministic DDIM sampling.

#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "diffapo/ndtensor.hpp"
#include "diffapo/rng.hpp"

namespace diffapo::diffusion {

/// Linear-beta schedule: beta_t spaced linearly from 1e-4 to 0.02 over
/// t = 1..T, alpha_bar[t] = prod_{i<=t} (1 - beta_i), alpha_bar[0] = 1.
class NoiseSchedule {
 public:
  static NoiseSchedule linear(int T);

  int max_timestep() const noexcept { return static_cast<int>(alpha_bar_.size()) - 1; }
  double alpha_bar(int t) const;
  double signal(int t) const { return sqrt_ab_.at(static_cast<std::size_t>(t)); }
  double noise(int t) const { return sqrt_1m_ab_.at(static_cast<std::size_t>(t)); }
  std::span<const double> alpha_bars() const noexcept { return alpha_bar_; }

 private:
  std::vector<double> alpha_bar_;
  std::vector<double> sqrt_ab_;
  std::vector<double> sqrt_1m_ab_;
};

inline NoiseSchedule build_schedule(int T) { return NoiseSchedule::linear(T); }

/// sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps.
nd::Tensor forward_diffuse(const nd::Tensor& x0, int t, const nd::Tensor& eps, const NoiseSchedule& sched);
/// Row-wise variant: row i of the rank-2 `x0` is corrupted to timesteps[i].
nd::Tensor forward_diffuse_rows(const nd::Tensor& x0, std::span<const int> timesteps, const nd::Tensor& eps,
                                const NoiseSchedule& sched);

inline constexpr int kNullCondition = -1;

/// A batch of model queries. `x_t` is rows x dim; `t` and `c` have one entry
/// per row. c == kNullCondition selects the unconditional embedding.
struct Batch {
  nd::Tensor x_t;
  std::vector<int> t;
  std::vector<int> c;

  std::size_t rows() const { return t.size(); }
};

enum class Pass { normal, skip };

/// Anything that predicts the injected noise. Implementations record their
/// computation on a tape so the same code path serves inference and training.
class Denoiser {
 public:
  virtual ~Denoiser() = default;

  /// Records the prediction for `batch`. Parameters are bound as trainable
  /// leaves only when `trainable` is set.
  virtual nd::Var record(nd::Tape& tape, const Batch& batch, Pass pass, bool trainable) const = 0;

  virtual nd::ParamSet& params() = 0;
  virtual const nd::ParamSet& params() const = 0;
  virtual std::unique_ptr<Denoiser> clone() const = 0;

  /// One forward evaluation without gradient bookkeeping.
  nd::Tensor predict(const Batch& batch, Pass pass = Pass::normal) const;
};

struct EpsModelConfig {
  int num_conditions = 8;
  int data_dim = 2;
  int time_dim = 32;
  int cond_dim = 32;
  int hidden = 128;
  int hidden_layers = 2;
  /// Hidden layer replaced by identity in the perturbed pass; must be >= 1
  /// since layer 0 changes width.
  int skip_layer = 1;

  void validate() const;
};

/// MLP epsilon-predictor. Input is [x_t, sin/cos time embedding, condition
/// embedding]; layer 0 is SiLU(affine), later hidden layers are residual
/// h + SiLU(affine(h)); a linear head maps back to data_dim. The condition
/// table has num_conditions + 1 rows, the last one being the null condition.
class EpsModel final : public Denoiser {
 public:
  EpsModel(const EpsModelConfig& config, Rng& rng);
  /// Adopts existing parameters; throws ConfigError if shapes disagree with `config`.
  EpsModel(const EpsModelConfig& config, nd::ParamSet params);
  /// Infers the architecture from parameter shapes.
  static EpsModel from_params(nd::ParamSet params, int skip_layer = 1);

  nd::Var record(nd::Tape& tape, const Batch& batch, Pass pass, bool trainable) const override;
  nd::ParamSet& params() override { return params_; }
  const nd::ParamSet& params() const override { return params_; }
  std::unique_ptr<Denoiser> clone() const override { return std::make_unique<EpsModel>(*this); }

  const EpsModelConfig& config() const noexcept { return config_; }

 private:
  void check_params() const;

  EpsModelConfig config_;
  nd::ParamSet params_;
};

/// Sinusoidal embedding of integer timesteps, rows x dim.
nd::Tensor time_embedding(std::span<const int> t, int dim);

/// Exact noise predictor for data concentrated on one point per condition:
/// eps = (x_t - sqrt(ab_t) * target_c) / sqrt(1 - ab_t). DDIM with this model
/// lands on the target. Stored as a single ParamSet entry "point_mass.targets".
class PointMassDenoiser final : public Denoiser {
 public:
  static constexpr const char* kEntryName = "point_mass.targets";

  PointMassDenoiser(nd::Tensor targets, NoiseSchedule schedule);
  PointMassDenoiser(nd::ParamSet params, NoiseSchedule schedule);

  nd::Var record(nd::Tape& tape, const Batch& batch, Pass pass, bool trainable) const override;
  nd::ParamSet& params() override { return params_; }
  const nd::ParamSet& params() const override { return params_; }
  std::unique_ptr<Denoiser> clone() const override { return std::make_unique<PointMassDenoiser>(*this); }

 private:
  nd::ParamSet params_;
  NoiseSchedule schedule_;
};

/// Builds whichever denoiser the parameter names describe.
std::unique_ptr<Denoiser> load_denoiser(nd::ParamSet params, const NoiseSchedule& schedule, int skip_layer = 1);

// ---------------------------------------------------------------------------
// Guidance

struct GuidanceConfig {
  double omega = 0.0;
  double lambda = 0.0;

  void validate() const;
  bool enabled() const noexcept { return omega != 0.0 || lambda != 0.0; }
};

struct Prediction {
  nd::Tensor eps;
  int evaluations = 0;
};

/// (1 + omega) * eps(c) - omega * eps(null). One evaluation when omega == 0.
Prediction cfg_predict(const Denoiser& model, const Batch& batch, double omega);
/// eps(c) - eps_skip(c).
Prediction perturbation_predict(const Denoiser& model, const Batch& batch);
/// cfg + lambda * perturbation, sharing the conditional pass.
Prediction guided_predict(const Denoiser& model, const Batch& batch, const GuidanceConfig& guidance);

// ---------------------------------------------------------------------------
// Sampling

struct InferenceGrid {
  std::vector<int> steps;

  std::size_t size() const noexcept { return steps.size(); }
};

/// sigma_i = i/N for i = N..1, shifted by s_star and rounded onto 0..T.
/// Duplicates are collapsed so the result is strictly decreasing.
InferenceGrid build_inference_grid(int N, double s_star, int T);

/// One deterministic DDIM update. Returns x0_hat when `t_next` is empty.
nd::Tensor ddim_step(const nd::Tensor& x_t, const nd::Tensor& eps_hat, int t, std::optional<int> t_next,
                     const NoiseSchedule& sched);

struct SampleResult {
  nd::Tensor x0;  ///< rows x data_dim
  int nfe = 0;    ///< model evaluations per sample
};

/// Starts every row i from unit Gaussian noise drawn from stream (seed, i)
/// and walks the grid with the DDIM update. Guidance is applied when given
/// and enabled. Throws NonFiniteError carrying the grid step index.
SampleResult sample_reverse(const Denoiser& model, std::span<const int> conditions, const InferenceGrid& grid,
                            const NoiseSchedule& sched, const std::optional<GuidanceConfig>& guidance,
                            std::uint64_t seed, int data_dim = 2);

// ---------------------------------------------------------------------------
// Denoising objective

/// Mean over rows of ||eps - eps_theta(x_t, t, c)||^2 for the given draws.
nd::Var record_dm_loss(nd::Tape& tape, const Denoiser& model, const nd::Tensor& x0, std::span<const int> c,
                       std::span<const int> t, const nd::Tensor& eps, const NoiseSchedule& sched, bool trainable);

/// Same objective with fresh standard-normal eps per row, value only.
double dm_loss(const Denoiser& model, const nd::Tensor& x0, std::span<const int> c, std::span<const int> t,
               const NoiseSchedule& sched, Rng& rng);

nd::Tensor normal_tensor(nd::Shape shape, Rng& rng);

}  // namespace diffapo::diffusion

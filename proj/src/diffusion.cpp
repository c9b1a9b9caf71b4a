// Copyright 2026 The diffapo Authors
// SPDX-License-Identifier: Apache-2.0

#include "diffapo/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "diffapo/timestep_shift.hpp"

namespace diffapo::diffusion {

using nd::Shape;
using nd::Tape;
using nd::Tensor;
using nd::Var;

// ---------------------------------------------------------------------------
// Schedule

NoiseSchedule NoiseSchedule::linear(int T) {
  if (T < 2) throw ConfigError("noise schedule needs T >= 2, got " + std::to_string(T));
  constexpr double beta_start = 1e-4;
  constexpr double beta_end = 0.02;
  NoiseSchedule s;
  s.alpha_bar_.resize(static_cast<std::size_t>(T) + 1);
  s.alpha_bar_[0] = 1.0;
  for (int t = 1; t <= T; ++t) {
    const double beta = beta_start + (beta_end - beta_start) * static_cast<double>(t - 1) / (T - 1);
    s.alpha_bar_[t] = s.alpha_bar_[t - 1] * (1.0 - beta);
  }
  for (double ab : s.alpha_bar_) {
    s.sqrt_ab_.push_back(std::sqrt(ab));
    s.sqrt_1m_ab_.push_back(std::sqrt(1.0 - ab));
  }
  return s;
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 0 || t > max_timestep()) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [0, " + std::to_string(max_timestep()) + "]");
  }
  return alpha_bar_[static_cast<std::size_t>(t)];
}

namespace {

void check_timestep(int t, const NoiseSchedule& sched) {
  if (t < 0 || t > sched.max_timestep()) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [0, " +
                            std::to_string(sched.max_timestep()) + "]");
  }
}

}  // namespace

Tensor forward_diffuse(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
  check_timestep(t, sched);
  if (x0.shape() != eps.shape()) {
    throw ShapeError("forward_diffuse", nd::shape_string(x0.shape()) + " vs " + nd::shape_string(eps.shape()));
  }
  const double a = sched.signal(t);
  const double b = sched.noise(t);
  Tensor out(x0.shape());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

Tensor forward_diffuse_rows(const Tensor& x0, std::span<const int> timesteps, const Tensor& eps,
                            const NoiseSchedule& sched) {
  if (x0.shape() != eps.shape() || x0.rank() != 2 || x0.dim(0) != timesteps.size()) {
    throw ShapeError("forward_diffuse_rows", nd::shape_string(x0.shape()) + " with " +
                                                 std::to_string(timesteps.size()) + " timesteps");
  }
  const std::size_t d = x0.dim(1);
  Tensor out(x0.shape());
  for (std::size_t r = 0; r < timesteps.size(); ++r) {
    check_timestep(timesteps[r], sched);
    const double a = sched.signal(timesteps[r]);
    const double b = sched.noise(timesteps[r]);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = a * x0[r * d + j] + b * eps[r * d + j];
  }
  return out;
}

Tensor normal_tensor(Shape shape, Rng& rng) {
  Tensor out(std::move(shape));
  for (double& v : out.data()) v = rng.normal();
  return out;
}

// ---------------------------------------------------------------------------
// Denoisers

Tensor Denoiser::predict(const Batch& batch, Pass pass) const {
  Tape tape;
  Var out = record(tape, batch, pass, false);
  return tape.value(out);
}

void EpsModelConfig::validate() const {
  if (num_conditions < 1) throw ConfigError("model: num_conditions must be >= 1");
  if (data_dim < 1) throw ConfigError("model: data_dim must be >= 1");
  if (time_dim < 2 || time_dim % 2 != 0) throw ConfigError("model: time_dim must be even and >= 2");
  if (cond_dim < 1) throw ConfigError("model: cond_dim must be >= 1");
  if (hidden < 1) throw ConfigError("model: hidden must be >= 1");
  if (hidden_layers < 2) throw ConfigError("model: hidden_layers must be >= 2");
  if (skip_layer < 1 || skip_layer >= hidden_layers) {
    throw ConfigError("model: skip_layer must be in [1, hidden_layers)");
  }
}

namespace {

std::string hidden_name(int layer, const char* what) {
  return "hidden" + std::to_string(layer) + "." + what;
}

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor out(std::move(shape));
  for (double& v : out.data()) v = rng.uniform(-bound, bound);
  return out;
}

}  // namespace

EpsModel::EpsModel(const EpsModelConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  const auto C = static_cast<std::size_t>(config_.num_conditions);
  const auto H = static_cast<std::size_t>(config_.hidden);
  const auto D = static_cast<std::size_t>(config_.data_dim);
  const std::size_t in = D + static_cast<std::size_t>(config_.time_dim + config_.cond_dim);

  params_.add("cond_embedding", normal_tensor(Shape{C + 1, static_cast<std::size_t>(config_.cond_dim)}, rng));
  for (int l = 0; l < config_.hidden_layers; ++l) {
    const std::size_t fan_in = l == 0 ? in : H;
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    params_.add(hidden_name(l, "weight"), uniform_tensor(Shape{fan_in, H}, bound, rng));
    params_.add(hidden_name(l, "bias"), uniform_tensor(Shape{H}, bound, rng));
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(H));
  params_.add("out.weight", uniform_tensor(Shape{H, D}, bound, rng));
  params_.add("out.bias", uniform_tensor(Shape{D}, bound, rng));
}

EpsModel::EpsModel(const EpsModelConfig& config, nd::ParamSet params) : config_(config), params_(std::move(params)) {
  config_.validate();
  check_params();
}

void EpsModel::check_params() const {
  const auto C = static_cast<std::size_t>(config_.num_conditions);
  const auto H = static_cast<std::size_t>(config_.hidden);
  const auto D = static_cast<std::size_t>(config_.data_dim);
  const std::size_t in = D + static_cast<std::size_t>(config_.time_dim + config_.cond_dim);

  auto expect = [&](const std::string& name, const Shape& shape) {
    auto idx = params_.find(name);
    if (!idx) throw ConfigError("model parameters lack '" + name + "'");
    if (params_[*idx].value.shape() != shape) {
      throw ConfigError("parameter '" + name + "' has shape " + nd::shape_string(params_[*idx].value.shape()) +
                        ", expected " + nd::shape_string(shape));
    }
  };
  expect("cond_embedding", {C + 1, static_cast<std::size_t>(config_.cond_dim)});
  for (int l = 0; l < config_.hidden_layers; ++l) {
    expect(hidden_name(l, "weight"), {l == 0 ? in : H, H});
    expect(hidden_name(l, "bias"), {H});
  }
  expect("out.weight", {H, D});
  expect("out.bias", {D});
  const std::size_t expected_entries = 3 + 2 * static_cast<std::size_t>(config_.hidden_layers);
  if (params_.size() != expected_entries) throw ConfigError("model parameters hold unexpected entries");
}

EpsModel EpsModel::from_params(nd::ParamSet params, int skip_layer) {
  EpsModelConfig cfg;
  const auto& table = params.value("cond_embedding");
  const auto& out_w = params.value("out.weight");
  const auto& w0 = params.value("hidden0.weight");
  if (table.rank() != 2 || out_w.rank() != 2 || w0.rank() != 2) {
    throw ConfigError("model parameters have unexpected rank");
  }
  cfg.num_conditions = static_cast<int>(table.dim(0)) - 1;
  cfg.cond_dim = static_cast<int>(table.dim(1));
  cfg.data_dim = static_cast<int>(out_w.dim(1));
  cfg.hidden = static_cast<int>(out_w.dim(0));
  cfg.time_dim = static_cast<int>(w0.dim(0)) - cfg.data_dim - cfg.cond_dim;
  int layers = 0;
  while (params.find(hidden_name(layers, "weight"))) ++layers;
  cfg.hidden_layers = layers;
  cfg.skip_layer = skip_layer;
  return EpsModel(cfg, std::move(params));
}

Tensor time_embedding(std::span<const int> t, int dim) {
  const std::size_t half = static_cast<std::size_t>(dim) / 2;
  Tensor out(Shape{t.size(), static_cast<std::size_t>(dim)});
  const double log_base = std::log(10000.0);
  for (std::size_t r = 0; r < t.size(); ++r) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-log_base * static_cast<double>(i) / static_cast<double>(half));
      const double arg = static_cast<double>(t[r]) * freq;
      out.at(r, i) = std::sin(arg);
      out.at(r, half + i) = std::cos(arg);
    }
  }
  return out;
}

namespace {

void check_batch(const Batch& batch, std::size_t data_dim, int num_conditions, const char* who) {
  const std::size_t rows = batch.t.size();
  if (batch.c.size() != rows || batch.x_t.rank() != 2 || batch.x_t.dim(0) != rows ||
      batch.x_t.dim(1) != data_dim) {
    throw ShapeError(who, "batch x_t " + nd::shape_string(batch.x_t.shape()) + " with " + std::to_string(rows) +
                              " timesteps and " + std::to_string(batch.c.size()) + " conditions");
  }
  for (int c : batch.c) {
    if (c != kNullCondition && (c < 0 || c >= num_conditions)) {
      throw std::out_of_range(std::string(who) + ": condition " + std::to_string(c) + " out of range");
    }
  }
  for (int t : batch.t) {
    if (t < 0) throw std::out_of_range(std::string(who) + ": negative timestep");
  }
}

}  // namespace

Var EpsModel::record(Tape& tape, const Batch& batch, Pass pass, bool trainable) const {
  const auto D = static_cast<std::size_t>(config_.data_dim);
  const auto C = static_cast<std::size_t>(config_.num_conditions);
  check_batch(batch, D, config_.num_conditions, "eps_model");
  const std::size_t rows = batch.rows();

  Tensor onehot(Shape{rows, C + 1});
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t slot = batch.c[r] == kNullCondition ? C : static_cast<std::size_t>(batch.c[r]);
    onehot.at(r, slot) = 1.0;
  }

  auto p = [&](const std::string& name) { return tape.param(params_, params_.index_of(name), trainable); };

  Var cond = tape.matmul(tape.constant(std::move(onehot)), p("cond_embedding"));
  const Var parts[] = {tape.constant(batch.x_t), tape.constant(time_embedding(batch.t, config_.time_dim)), cond};
  Var h = tape.silu(tape.affine(tape.concat(parts), p("hidden0.weight"), p("hidden0.bias")));
  for (int l = 1; l < config_.hidden_layers; ++l) {
    if (pass == Pass::skip && l == config_.skip_layer) continue;
    h = tape.add(h, tape.silu(tape.affine(h, p(hidden_name(l, "weight")), p(hidden_name(l, "bias")))));
  }
  return tape.affine(h, p("out.weight"), p("out.bias"));
}

PointMassDenoiser::PointMassDenoiser(Tensor targets, NoiseSchedule schedule) : schedule_(std::move(schedule)) {
  if (targets.rank() != 2) throw ConfigError("point-mass targets must be conditions x dim");
  params_.add(kEntryName, std::move(targets));
}

PointMassDenoiser::PointMassDenoiser(nd::ParamSet params, NoiseSchedule schedule)
    : params_(std::move(params)), schedule_(std::move(schedule)) {
  if (params_.size() != 1 || !params_.find(kEntryName) || params_[0].value.rank() != 2) {
    throw ConfigError("point-mass denoiser expects a single rank-2 '" + std::string(kEntryName) + "' entry");
  }
}

Var PointMassDenoiser::record(Tape& tape, const Batch& batch, Pass, bool) const {
  const Tensor& targets = params_[0].value;
  const std::size_t C = targets.dim(0), D = targets.dim(1);
  check_batch(batch, D, static_cast<int>(C), "point_mass");
  Tensor out(batch.x_t.shape());
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    const int t = batch.t[r];
    check_timestep(t, schedule_);
    const double a = schedule_.signal(t);
    const double b = schedule_.noise(t);
    for (std::size_t j = 0; j < D; ++j) {
      double target = 0.0;
      if (batch.c[r] == kNullCondition) {
        for (std::size_t k = 0; k < C; ++k) target += targets.at(k, j);
        target /= static_cast<double>(C);
      } else {
        target = targets.at(static_cast<std::size_t>(batch.c[r]), j);
      }
      out.at(r, j) = b > 0.0 ? (batch.x_t.at(r, j) - a * target) / b : 0.0;
    }
  }
  return tape.constant(std::move(out));
}

std::unique_ptr<Denoiser> load_denoiser(nd::ParamSet params, const NoiseSchedule& schedule, int skip_layer) {
  if (params.find(PointMassDenoiser::kEntryName)) {
    return std::make_unique<PointMassDenoiser>(std::move(params), schedule);
  }
  return std::make_unique<EpsModel>(EpsModel::from_params(std::move(params), skip_layer));
}

// ---------------------------------------------------------------------------
// Guidance

void GuidanceConfig::validate() const {
  if (!std::isfinite(omega) || omega < 0.0) throw ConfigError("guidance omega must be finite and >= 0");
  if (!std::isfinite(lambda) || lambda < 0.0) throw ConfigError("guidance lambda must be finite and >= 0");
}

namespace {

Batch null_batch(const Batch& batch) {
  Batch out = batch;
  std::fill(out.c.begin(), out.c.end(), kNullCondition);
  return out;
}

}  // namespace

Prediction cfg_predict(const Denoiser& model, const Batch& batch, double omega) {
  Prediction out{model.predict(batch), 1};
  if (omega != 0.0) {
    const Tensor uncond = model.predict(null_batch(batch));
    ++out.evaluations;
    for (std::size_t i = 0; i < out.eps.size(); ++i) out.eps[i] = (1.0 + omega) * out.eps[i] - omega * uncond[i];
  }
  return out;
}

Prediction perturbation_predict(const Denoiser& model, const Batch& batch) {
  Prediction out{model.predict(batch), 2};
  const Tensor skipped = model.predict(batch, Pass::skip);
  for (std::size_t i = 0; i < out.eps.size(); ++i) out.eps[i] -= skipped[i];
  return out;
}

Prediction guided_predict(const Denoiser& model, const Batch& batch, const GuidanceConfig& guidance) {
  const Tensor cond = model.predict(batch);
  Prediction out{cond, 1};
  if (guidance.omega != 0.0) {
    const Tensor uncond = model.predict(null_batch(batch));
    ++out.evaluations;
    for (std::size_t i = 0; i < out.eps.size(); ++i) {
      out.eps[i] = (1.0 + guidance.omega) * cond[i] - guidance.omega * uncond[i];
    }
  }
  if (guidance.lambda != 0.0) {
    const Tensor skipped = model.predict(batch, Pass::skip);
    ++out.evaluations;
    for (std::size_t i = 0; i < out.eps.size(); ++i) out.eps[i] += guidance.lambda * (cond[i] - skipped[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sampling

InferenceGrid build_inference_grid(int N, double s_star, int T) {
  if (N < 2) throw ConfigError("inference grid needs N >= 2");
  if (!(s_star > 0.0)) throw ConfigError("deployment shift must be positive");
  InferenceGrid grid;
  for (int i = N; i >= 1; --i) {
    const int t = apo::anchor_timestep(static_cast<double>(i) / N, s_star, T);
    if (grid.steps.empty() || t < grid.steps.back()) grid.steps.push_back(t);
  }
  return grid;
}

Tensor ddim_step(const Tensor& x_t, const Tensor& eps_hat, int t, std::optional<int> t_next,
                 const NoiseSchedule& sched) {
  check_timestep(t, sched);
  if (x_t.shape() != eps_hat.shape()) throw ShapeError("ddim_step", "x_t and eps_hat differ in shape");
  const double a = sched.signal(t);
  const double b = sched.noise(t);
  Tensor x0(x_t.shape());
  for (std::size_t i = 0; i < x_t.size(); ++i) x0[i] = (x_t[i] - b * eps_hat[i]) / a;
  if (!t_next) return x0;
  check_timestep(*t_next, sched);
  const double a_next = sched.signal(*t_next);
  const double b_next = sched.noise(*t_next);
  Tensor out(x_t.shape());
  for (std::size_t i = 0; i < x_t.size(); ++i) out[i] = a_next * x0[i] + b_next * eps_hat[i];
  return out;
}

SampleResult sample_reverse(const Denoiser& model, std::span<const int> conditions, const InferenceGrid& grid,
                            const NoiseSchedule& sched, const std::optional<GuidanceConfig>& guidance,
                            std::uint64_t seed, int data_dim) {
  if (grid.steps.empty()) throw ConfigError("empty inference grid");
  const std::size_t rows = conditions.size();
  const auto D = static_cast<std::size_t>(data_dim);
  Batch batch;
  batch.x_t = Tensor(Shape{rows, D});
  batch.c.assign(conditions.begin(), conditions.end());
  for (std::size_t r = 0; r < rows; ++r) {
    Rng rng = Rng::stream(seed, "reverse", r);
    for (std::size_t j = 0; j < D; ++j) batch.x_t.at(r, j) = rng.normal();
  }

  SampleResult result;
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const int t = grid.steps[k];
    batch.t.assign(rows, t);
    Prediction pred;
    try {
      pred = guidance && guidance->enabled() ? guided_predict(model, batch, *guidance)
                                             : Prediction{model.predict(batch), 1};
    } catch (const NonFiniteError&) {
      throw NonFiniteError("reverse sampling", k);
    }
    result.nfe += pred.evaluations;
    const bool last = k + 1 == grid.size();
    Tensor next = ddim_step(batch.x_t, pred.eps, t, last ? std::nullopt : std::optional<int>(grid.steps[k + 1]), sched);
    if (!next.all_finite()) throw NonFiniteError("reverse sampling", k);
    if (last) {
      result.x0 = std::move(next);
    } else {
      batch.x_t = std::move(next);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Denoising objective

Var record_dm_loss(Tape& tape, const Denoiser& model, const Tensor& x0, std::span<const int> c,
                   std::span<const int> t, const Tensor& eps, const NoiseSchedule& sched, bool trainable) {
  if (x0.rank() != 2 || x0.dim(0) == 0) throw ShapeError("dm_loss", "needs a nonempty rows x dim batch");
  Batch batch{forward_diffuse_rows(x0, t, eps, sched), std::vector<int>(t.begin(), t.end()),
              std::vector<int>(c.begin(), c.end())};
  Var pred = model.record(tape, batch, Pass::normal, trainable);
  Var err = nd::sub(tape, tape.constant(eps), pred);
  return nd::scale(tape, tape.sum(tape.square(err)), 1.0 / static_cast<double>(x0.dim(0)));
}

double dm_loss(const Denoiser& model, const Tensor& x0, std::span<const int> c, std::span<const int> t,
               const NoiseSchedule& sched, Rng& rng) {
  const Tensor eps = normal_tensor(x0.shape(), rng);
  Tape tape;
  return tape.value(record_dm_loss(tape, model, x0, c, t, eps, sched, false)).item();
}

}  // namespace diffapo::diffusion

// Copyright 2026 The diffapo Authors
// SPDX-License-Identifier: Apache-2.0

#include "diffapo/optim.hpp"

#include <cmath>

namespace diffapo::nd {

void AdamW::step(ParamSet& params, int step_count) {
  if (step_count < 1) throw Error("adamw: step_count must be >= 1");
  step_count_ = step_count;
  if (m_.size() != params.size()) {
    m_.clear();
    v_.clear();
    for (const auto& e : params) {
      m_.emplace_back(e.value.shape());
      v_.emplace_back(e.value.shape());
    }
  }
  const double bc1 = 1.0 - std::pow(config_.beta1, step_count);
  const double bc2 = 1.0 - std::pow(config_.beta2, step_count);

  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& entry = params[k];
    if (!entry.grad.all_finite()) {
      warnings_.push_back("step " + std::to_string(step_count) + ": skipped '" + entry.name +
                          "' (non-finite gradient)");
      continue;
    }
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    auto p = entry.value.data();
    auto g = entry.grad.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      p[i] -= config_.lr * config_.weight_decay * p[i];
      p[i] -= config_.lr * m_hat / (std::sqrt(v_hat) + config_.eps);
    }
  }
}

}  // namespace diffapo::nd

// Copyright 2026 The diffapo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "diffapo/ndtensor.hpp"

namespace diffapo::nd {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// AdamW with bias correction and decoupled weight decay. Moment buffers are
/// created lazily per ParamSet entry and are not part of checkpoints.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  /// Applies one update using the next step count.
  void step(ParamSet& params) { step(params, step_count_ + 1); }
  /// Applies one update with an explicit step count (>= 1) for bias correction.
  /// Entries whose gradient holds a NaN/inf are left untouched and a warning is
  /// recorded.
  void step(ParamSet& params, int step_count);

  int step_count() const noexcept { return step_count_; }
  const AdamWConfig& config() const noexcept { return config_; }
  void set_lr(double lr) { config_.lr = lr; }
  const std::vector<std::string>& warnings() const noexcept { return warnings_; }

 private:
  AdamWConfig config_;
  int step_count_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::vector<std::string> warnings_;
};

}  // namespace diffapo::nd

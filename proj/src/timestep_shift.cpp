// Copyright 2026 The diffapo Authors
// SPDX-License-Identifier: Apache-2.0

#include "diffapo/timestep_shift.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace diffapo::apo {

double shift_sigma(double sigma, double s) {
  if (!(sigma >= 0.0 && sigma <= 1.0)) {
    throw std::invalid_argument("shift_sigma: sigma must lie in [0,1], got " + std::to_string(sigma));
  }
  if (!(s > 0.0) || !std::isfinite(s)) {
    throw std::invalid_argument("shift_sigma: shift must be positive, got " + std::to_string(s));
  }
  return s * sigma / (1.0 + (s - 1.0) * sigma);
}

double unshift_sigma(double shifted, double s) {
  if (!(shifted >= 0.0 && shifted <= 1.0)) {
    throw std::invalid_argument("unshift_sigma: value must lie in [0,1]");
  }
  if (!(s > 0.0)) throw std::invalid_argument("unshift_sigma: shift must be positive");
  return shifted / (s - (s - 1.0) * shifted);
}

long round_half_up(double x) { return static_cast<long>(std::floor(x + 0.5)); }

int anchor_timestep(double sigma, double s, int T) {
  const long t = round_half_up(shift_sigma(sigma, s) * static_cast<double>(T));
  return static_cast<int>(std::clamp<long>(t, 0, T));
}

}  // namespace diffapo::apo

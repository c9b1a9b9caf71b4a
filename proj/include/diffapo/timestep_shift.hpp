// Copyright 2026 The diffapo Authors
// SPDX-License-Identifier: Apache-2.0

// Schedule shift map sigma -> s*sigma / (1 + (s-1)*sigma) and its
// discretisation onto integer timesteps.

#pragma once

namespace diffapo::apo {

/// Requires 0 <= sigma <= 1 and s > 0; throws std::invalid_argument otherwise.
double shift_sigma(double sigma, double s);

/// Inverse of shift_sigma for fixed s.
double unshift_sigma(double shifted, double s);

/// round-half-up(shift_sigma(sigma, s) * T), always in [0, T].
int anchor_timestep(double sigma, double s, int T);

/// round-half-up for non-negative and negative inputs alike.
long round_half_up(double x);

}  // namespace diffapo::apo

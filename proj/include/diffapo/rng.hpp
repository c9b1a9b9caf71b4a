// Copyright 2026 The diffapo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace diffapo {

/// Mixes (master seed, stream name, counter) into an independent 64-bit seed.
std::uint64_t derive_seed(std::uint64_t master, std::string_view name, std::uint64_t counter = 0);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Named stream derived from a master seed; the same triple always yields
  /// the same sequence regardless of what other streams consumed.
  static Rng stream(std::uint64_t master, std::string_view name, std::uint64_t counter = 0) {
    return Rng(derive_seed(master, name, counter));
  }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  /// Inclusive on both ends.
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }
  double normal() { return normal_(engine_); }
  bool bernoulli(double p) { return uniform() < p; }
  std::uint64_t next_u64() { return engine_(); }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace diffapo

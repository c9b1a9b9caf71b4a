// Copyright 2026 The diffapo Authors
// SPDX-License-Identifier: Apache-2.0

// ParamSet checkpoint format (little-endian):
//   "APO1" | u32 entry count | per entry: u16 name length, UTF-8 name,
//   u8 rank, u32 extents[rank], f64 data[prod(extents)]
// Optimizer moments are not stored.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "diffapo/ndtensor.hpp"

namespace diffapo::nd {

std::vector<std::uint8_t> encode_checkpoint(const ParamSet& params);
/// Throws CheckpointError on bad magic, truncation or trailing bytes.
ParamSet decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const ParamSet& params, const std::string& path);
ParamSet load_checkpoint(const std::string& path);

}  // namespace diffapo::nd

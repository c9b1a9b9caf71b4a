// Copyright 2026 The diffapo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace diffapo {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A tensor operation received operands of incompatible shape.
class ShapeError : public Error {
 public:
  ShapeError(std::string op, const std::string& detail)
      : Error(op + ": " + detail), op_(std::move(op)) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

/// A NaN or infinity showed up. `index` is the tape position, sampler step
/// or optimizer step depending on where it was detected.
class NonFiniteError : public Error {
 public:
  NonFiniteError(const std::string& where, std::size_t index)
      : Error("non-finite value in " + where + " at index " + std::to_string(index)),
        where_(where),
        index_(index) {}
  const std::string& where() const noexcept { return where_; }
  std::size_t index() const noexcept { return index_; }

 private:
  std::string where_;
  std::size_t index_;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace diffapo

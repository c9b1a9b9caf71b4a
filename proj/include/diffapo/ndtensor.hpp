// Copyright 2026 The diffapo Authors
// SPDX-License-Identifier: Apache-2.0

// Dense f64 tensors, named parameter collections and a reverse-mode tape.
//
// The tape records a closed set of primitives (add, mul, matmul, affine, silu,
// square, sum, mean, sigmoid, log, concat). Everything else in the library is
// composed from these. Broadcasting is limited to a scalar second operand or a
// second operand matching the first without its leading batch dimension.

#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "diffapo/errors.hpp"

namespace diffapo::nd {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

class Tensor {
 public:
  /// Rank-0 scalar holding 0.
  Tensor() : data_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }
  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t row, std::size_t col) { return data_[row * shape_.back() + col]; }
  double at(std::size_t row, std::size_t col) const { return data_[row * shape_.back() + col]; }

  /// Value of a single-element tensor.
  double item() const;
  bool all_finite() const noexcept;
  void fill(double value);

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// True when both tensors have equal shape and identical bit patterns.
bool bit_identical(const Tensor& a, const Tensor& b);

/// Named trainable values with gradient slots of identical shape. Iteration
/// follows insertion order.
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    Tensor grad;
  };

  std::size_t add(std::string name, Tensor value);
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }

  Entry& operator[](std::size_t i) { return entries_.at(i); }
  const Entry& operator[](std::size_t i) const { return entries_.at(i); }

  std::optional<std::size_t> find(std::string_view name) const;
  std::size_t index_of(std::string_view name) const;
  Tensor& value(std::string_view name) { return entries_[index_of(name)].value; }
  const Tensor& value(std::string_view name) const { return entries_[index_of(name)].value; }
  Tensor& grad(std::string_view name) { return entries_[index_of(name)].grad; }

  void zero_grad();
  std::size_t parameter_count() const;

  auto begin() noexcept { return entries_.begin(); }
  auto end() noexcept { return entries_.end(); }
  auto begin() const noexcept { return entries_.begin(); }
  auto end() const noexcept { return entries_.end(); }

  /// Names, shapes and value bits all match; gradients are ignored.
  bool values_identical(const ParamSet& other) const;

 private:
  std::vector<Entry> entries_;
};

struct Var {
  std::size_t id = 0;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaves.
  Var constant(Tensor value);
  /// Input leaf whose gradient is kept on the tape (read with grad()).
  Var variable(Tensor value);
  /// Leaf aliasing a ParamSet entry. The ParamSet must outlive the tape and
  /// must not grow while the tape is alive. Gradients only flow into it when
  /// `trainable` is set and it is passed as the sink to backward().
  Var param(const ParamSet& params, std::size_t index, bool trainable);

  // Primitives.
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  Var matmul(Var a, Var b);
  Var affine(Var x, Var weight, Var bias);
  Var silu(Var x);
  Var square(Var x);
  Var sum(Var x);
  Var mean(Var x);
  Var sigmoid(Var x);
  Var log(Var x);
  Var concat(std::span<const Var> parts);

  const Tensor& value(Var v) const;
  /// Adjoint from the most recent backward(); zeros if the node was not reached.
  const Tensor& grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Reverse sweep from a single-element `loss`, seeded with 1. Adjoints of
  /// trainable leaves bound to `sink` are added into its gradient slots.
  /// Returns the loss value.
  double backward(Var loss, ParamSet* sink = nullptr);

 private:
  enum class Op { leaf, add, mul, matmul, affine, silu, square, sum, mean, sigmoid, log, concat };

  struct Node {
    Op op = Op::leaf;
    std::size_t in[3] = {0, 0, 0};
    std::vector<std::size_t> parts;
    Tensor value;
    const Tensor* alias = nullptr;
    const ParamSet* owner = nullptr;
    std::size_t param_index = 0;
    bool requires_grad = false;
    Tensor grad;
    bool has_grad = false;
  };

  const Tensor& val(std::size_t id) const;
  Var push(Op op, std::initializer_list<std::size_t> inputs, Tensor value, const char* name);
  Tensor& grad_slot(std::size_t id);
  static const char* op_name(Op op);

  std::vector<Node> nodes_;
};

/// Records `f` on a fresh tape, runs the reverse sweep into `params` and
/// returns the loss. Gradients accumulate into existing slots.
double forward_backward(ParamSet& params, const std::function<Var(Tape&)>& f);

// Compositions over the primitive set.
Var sub(Tape& tape, Var a, Var b);
Var scale(Tape& tape, Var a, double factor);
Var neg(Tape& tape, Var a);
/// Sum over the last axis of a rank-2 tensor, producing rows x 1.
Var row_sum(Tape& tape, Var a);

}  // namespace diffapo::nd

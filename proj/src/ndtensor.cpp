// Copyright 2026 The diffapo Authors
// SPDX-License-Identifier: Apache-2.0

#include "diffapo/ndtensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace diffapo::nd {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw ShapeError("tensor", "shape " + shape_string(shape_) + " holds " +
                                   std::to_string(shape_size(shape_)) + " values, got " +
                                   std::to_string(data_.size()));
  }
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor(Shape{values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
  return Tensor(Shape{rows, cols}, std::vector<double>(values));
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ShapeError("item", "expected a single element, shape " + shape_string(shape_));
  }
  return data_[0];
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool bit_identical(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

// ---------------------------------------------------------------------------
// ParamSet

std::size_t ParamSet::add(std::string name, Tensor value) {
  if (find(name)) throw Error("duplicate parameter name '" + name + "'");
  Tensor grad(value.shape());
  entries_.push_back(Entry{std::move(name), std::move(value), std::move(grad)});
  return entries_.size() - 1;
}

std::optional<std::size_t> ParamSet::find(std::string_view name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name == name) return i;
  }
  return std::nullopt;
}

std::size_t ParamSet::index_of(std::string_view name) const {
  auto i = find(name);
  if (!i) throw Error("no parameter named '" + std::string(name) + "'");
  return *i;
}

void ParamSet::zero_grad() {
  for (auto& e : entries_) e.grad.fill(0.0);
}

std::size_t ParamSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

bool ParamSet::values_identical(const ParamSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name != other.entries_[i].name) return false;
    if (!bit_identical(entries_[i].value, other.entries_[i].value)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

enum class Broadcast { same, scalar, rows };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::same;
  if (b.size() == 1) return Broadcast::scalar;
  if (a.rank() >= 1 && b.rank() + 1 == a.rank() &&
      std::equal(b.shape().begin(), b.shape().end(), a.shape().begin() + 1)) {
    return Broadcast::rows;
  }
  throw ShapeError(op, "cannot combine " + shape_string(a.shape()) + " with " +
                           shape_string(b.shape()));
}

inline double b_at(const Tensor& b, Broadcast kind, std::size_t i) {
  switch (kind) {
    case Broadcast::same: return b[i];
    case Broadcast::scalar: return b[0];
    case Broadcast::rows: return b[i % b.size()];
  }
  return 0.0;
}

// c += a(n x k) * b(k x m)
void gemm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = c + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// c(n x k) += g(n x m) * b(k x m)^T
void gemm_nt(const double* g, const double* b, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* grow = g + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * m;
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) acc += grow[j] * brow[j];
      c[i * k + p] += acc;
    }
  }
}

// c(k x m) += a(n x k)^T * g(n x m)
void gemm_tn(const double* a, const double* g, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* grow = g + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      double* crow = c + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * grow[j];
    }
  }
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape

const char* Tape::op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::mul: return "mul";
    case Op::matmul: return "matmul";
    case Op::affine: return "affine";
    case Op::silu: return "silu";
    case Op::square: return "square";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::sigmoid: return "sigmoid";
    case Op::log: return "log";
    case Op::concat: return "concat";
  }
  return "?";
}

const Tensor& Tape::val(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.alias ? *n.alias : n.value;
}

const Tensor& Tape::value(Var v) const {
  if (v.id >= nodes_.size()) throw Error("tape: unknown variable");
  return val(v.id);
}

const Tensor& Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (!n.has_grad) {
    static thread_local Tensor empty;
    empty = Tensor(val(v.id).shape());
    return empty;
  }
  return n.grad;
}

Var Tape::push(Op op, std::initializer_list<std::size_t> inputs, Tensor value, const char* name) {
  const std::size_t position = nodes_.size();
  if (!value.all_finite()) throw NonFiniteError(std::string("tape op ") + name, position);
  Node node;
  node.op = op;
  std::size_t k = 0;
  for (std::size_t in : inputs) {
    node.in[k++] = in;
    node.requires_grad = node.requires_grad || nodes_[in].requires_grad;
  }
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var{position};
}

Var Tape::constant(Tensor value) {
  const std::size_t position = nodes_.size();
  if (!value.all_finite()) throw NonFiniteError("tape constant", position);
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var{position};
}

Var Tape::variable(Tensor value) {
  Var v = constant(std::move(value));
  nodes_[v.id].requires_grad = true;
  return v;
}

Var Tape::param(const ParamSet& params, std::size_t index, bool trainable) {
  const std::size_t position = nodes_.size();
  const Tensor& value = params[index].value;
  if (!value.all_finite()) throw NonFiniteError("parameter '" + params[index].name + "'", position);
  Node node;
  node.alias = &value;
  node.owner = &params;
  node.param_index = index;
  node.requires_grad = trainable;
  nodes_.push_back(std::move(node));
  return Var{position};
}

Var Tape::add(Var a, Var b) {
  const Tensor& x = val(a.id);
  const Tensor& y = val(b.id);
  const Broadcast kind = broadcast_kind(x, y, "add");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + b_at(y, kind, i);
  return push(Op::add, {a.id, b.id}, std::move(out), "add");
}

Var Tape::mul(Var a, Var b) {
  const Tensor& x = val(a.id);
  const Tensor& y = val(b.id);
  const Broadcast kind = broadcast_kind(x, y, "mul");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * b_at(y, kind, i);
  return push(Op::mul, {a.id, b.id}, std::move(out), "mul");
}

Var Tape::matmul(Var a, Var b) {
  const Tensor& x = val(a.id);
  const Tensor& y = val(b.id);
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(0)) {
    throw ShapeError("matmul", shape_string(x.shape()) + " x " + shape_string(y.shape()));
  }
  Tensor out(Shape{x.dim(0), y.dim(1)});
  gemm_nn(x.data().data(), y.data().data(), out.data().data(), x.dim(0), x.dim(1), y.dim(1));
  return push(Op::matmul, {a.id, b.id}, std::move(out), "matmul");
}

Var Tape::affine(Var x, Var weight, Var bias) {
  const Tensor& in = val(x.id);
  const Tensor& w = val(weight.id);
  const Tensor& b = val(bias.id);
  if (in.rank() != 2 || w.rank() != 2 || in.dim(1) != w.dim(0) || b.rank() != 1 ||
      b.dim(0) != w.dim(1)) {
    throw ShapeError("affine", shape_string(in.shape()) + " x " + shape_string(w.shape()) +
                                   " + " + shape_string(b.shape()));
  }
  const std::size_t n = in.dim(0), m = w.dim(1);
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(b.data().begin(), b.data().end(), out.data().begin() + i * m);
  }
  gemm_nn(in.data().data(), w.data().data(), out.data().data(), n, in.dim(1), m);
  return push(Op::affine, {x.id, weight.id, bias.id}, std::move(out), "affine");
}

Var Tape::silu(Var x) {
  const Tensor& in = val(x.id);
  Tensor out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * stable_sigmoid(in[i]);
  return push(Op::silu, {x.id}, std::move(out), "silu");
}

Var Tape::square(Var x) {
  const Tensor& in = val(x.id);
  Tensor out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * in[i];
  return push(Op::square, {x.id}, std::move(out), "square");
}

Var Tape::sum(Var x) {
  const Tensor& in = val(x.id);
  double acc = 0.0;
  for (double v : in.data()) acc += v;
  return push(Op::sum, {x.id}, Tensor::scalar(acc), "sum");
}

Var Tape::mean(Var x) {
  const Tensor& in = val(x.id);
  double acc = 0.0;
  for (double v : in.data()) acc += v;
  return push(Op::mean, {x.id}, Tensor::scalar(acc / static_cast<double>(in.size())), "mean");
}

Var Tape::sigmoid(Var x) {
  const Tensor& in = val(x.id);
  Tensor out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = stable_sigmoid(in[i]);
  return push(Op::sigmoid, {x.id}, std::move(out), "sigmoid");
}

Var Tape::log(Var x) {
  const Tensor& in = val(x.id);
  Tensor out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::log(in[i]);
  return push(Op::log, {x.id}, std::move(out), "log");
}

Var Tape::concat(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat", "no inputs");
  const Tensor& first = val(parts[0].id);
  if (first.rank() != 2) throw ShapeError("concat", "inputs must be rank 2");
  const std::size_t rows = first.dim(0);
  std::size_t cols = 0;
  for (Var p : parts) {
    const Tensor& t = val(p.id);
    if (t.rank() != 2 || t.dim(0) != rows) {
      throw ShapeError("concat", "row mismatch: " + shape_string(first.shape()) + " vs " +
                                     shape_string(t.shape()));
    }
    cols += t.dim(1);
  }
  Tensor out(Shape{rows, cols});
  std::size_t offset = 0;
  for (Var p : parts) {
    const Tensor& t = val(p.id);
    const std::size_t w = t.dim(1);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(t.data().begin() + r * w, w, out.data().begin() + r * cols + offset);
    }
    offset += w;
  }
  const std::size_t position = nodes_.size();
  if (!out.all_finite()) throw NonFiniteError("tape op concat", position);
  Node node;
  node.op = Op::concat;
  for (Var p : parts) {
    node.parts.push_back(p.id);
    node.requires_grad = node.requires_grad || nodes_[p.id].requires_grad;
  }
  node.value = std::move(out);
  nodes_.push_back(std::move(node));
  return Var{position};
}

Tensor& Tape::grad_slot(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor(val(id).shape());
    n.has_grad = true;
  }
  return n.grad;
}

double Tape::backward(Var loss, ParamSet* sink) {
  const Tensor& out = val(loss.id);
  if (out.size() != 1) {
    throw ShapeError("backward", "loss must hold one element, shape " + shape_string(out.shape()));
  }
  for (auto& n : nodes_) {
    n.has_grad = false;
  }
  grad_slot(loss.id)[0] = 1.0;

  for (std::size_t id = loss.id + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.has_grad || !node.requires_grad) continue;
    if (!node.grad.all_finite()) throw NonFiniteError("backward adjoint", id);
    const Tensor& g = node.grad;

    auto wants = [&](std::size_t in) { return nodes_[in].requires_grad; };

    switch (node.op) {
      case Op::leaf:
        if (sink && node.owner == sink) {
          Tensor& slot = (*sink)[node.param_index].grad;
          for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += g[i];
        }
        break;
      case Op::add:
      case Op::mul: {
        const std::size_t ia = node.in[0], ib = node.in[1];
        const Tensor& x = val(ia);
        const Tensor& y = val(ib);
        const Broadcast kind = broadcast_kind(x, y, op_name(node.op));
        const bool is_mul = node.op == Op::mul;
        if (wants(ia)) {
          Tensor& ga = grad_slot(ia);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += is_mul ? g[i] * b_at(y, kind, i) : g[i];
        }
        if (wants(ib)) {
          Tensor& gb = grad_slot(ib);
          for (std::size_t i = 0; i < g.size(); ++i) {
            const double contrib = is_mul ? g[i] * x[i] : g[i];
            switch (kind) {
              case Broadcast::same: gb[i] += contrib; break;
              case Broadcast::scalar: gb[0] += contrib; break;
              case Broadcast::rows: gb[i % gb.size()] += contrib; break;
            }
          }
        }
        break;
      }
      case Op::matmul:
      case Op::affine: {
        const std::size_t ia = node.in[0], iw = node.in[1];
        const Tensor& x = val(ia);
        const Tensor& w = val(iw);
        const std::size_t n = x.dim(0), k = x.dim(1), m = w.dim(1);
        if (wants(ia)) gemm_nt(g.data().data(), w.data().data(), grad_slot(ia).data().data(), n, k, m);
        if (wants(iw)) gemm_tn(x.data().data(), g.data().data(), grad_slot(iw).data().data(), n, k, m);
        if (node.op == Op::affine && wants(node.in[2])) {
          Tensor& gb = grad_slot(node.in[2]);
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < m; ++j) gb[j] += g[i * m + j];
          }
        }
        break;
      }
      case Op::silu: {
        const Tensor& x = val(node.in[0]);
        Tensor& gx = grad_slot(node.in[0]);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double s = stable_sigmoid(x[i]);
          gx[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
        }
        break;
      }
      case Op::square: {
        const Tensor& x = val(node.in[0]);
        Tensor& gx = grad_slot(node.in[0]);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += 2.0 * x[i] * g[i];
        break;
      }
      case Op::sum:
      case Op::mean: {
        Tensor& gx = grad_slot(node.in[0]);
        const double scale = node.op == Op::mean ? g[0] / static_cast<double>(gx.size()) : g[0];
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += scale;
        break;
      }
      case Op::sigmoid: {
        const Tensor& y = node.value;
        Tensor& gx = grad_slot(node.in[0]);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
        break;
      }
      case Op::log: {
        const Tensor& x = val(node.in[0]);
        Tensor& gx = grad_slot(node.in[0]);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / x[i];
        break;
      }
      case Op::concat: {
        const std::size_t rows = g.dim(0), cols = g.dim(1);
        std::size_t offset = 0;
        for (std::size_t part : node.parts) {
          const std::size_t w = val(part).dim(1);
          if (wants(part)) {
            Tensor& gp = grad_slot(part);
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t c = 0; c < w; ++c) gp[r * w + c] += g[r * cols + offset + c];
            }
          }
          offset += w;
        }
        break;
      }
    }
  }
  return out[0];
}

double forward_backward(ParamSet& params, const std::function<Var(Tape&)>& f) {
  Tape tape;
  Var loss = f(tape);
  return tape.backward(loss, &params);
}

Var sub(Tape& tape, Var a, Var b) { return tape.add(a, neg(tape, b)); }

Var scale(Tape& tape, Var a, double factor) {
  return tape.mul(a, tape.constant(Tensor::scalar(factor)));
}

Var neg(Tape& tape, Var a) { return scale(tape, a, -1.0); }

Var row_sum(Tape& tape, Var a) {
  const Tensor& x = tape.value(a);
  if (x.rank() != 2) throw ShapeError("row_sum", "expected rank 2, got " + shape_string(x.shape()));
  return tape.matmul(a, tape.constant(Tensor(Shape{x.dim(1), 1}, 1.0)));
}

}  // namespace diffapo::nd

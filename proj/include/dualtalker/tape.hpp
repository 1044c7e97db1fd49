// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

#include "dualtalker/tensor.hpp"

namespace dualtalker {

/// The closed primitive catalog. Model and loss code composes only these.
enum class Op : std::uint8_t {
  matmul,
  add,
  subtract,
  multiply,
  scale,
  relu,
  sigmoid,
  tanh,
  exp,
  log,
  softmax_rows,
  concat_cols,
  slice,
  transpose,
  sum,
  mean,
  broadcast_row,
  layer_norm_rows,
};

inline constexpr std::array<Op, 18> kAllOps = {
    Op::matmul, Op::add,          Op::subtract, Op::multiply,      Op::scale,         Op::relu,
    Op::sigmoid, Op::tanh,        Op::exp,      Op::log,           Op::softmax_rows,  Op::concat_cols,
    Op::slice,  Op::transpose,    Op::sum,      Op::mean,          Op::broadcast_row, Op::layer_norm_rows,
};

std::string_view op_name(Op op);

/// Per-primitive attributes. Only the fields relevant to the kind are read.
struct OpAttrs {
  double factor = 1.0;       // scale
  std::size_t axis = 0;      // slice: 0 = rows, 1 = columns
  std::size_t begin = 0;     // slice
  std::size_t end = 0;       // slice (exclusive)
  std::size_t rows = 0;      // broadcast_row
  bool causal = false;       // softmax_rows: entry (i, j) with j > i gets weight 0
  double epsilon = 1e-5;     // layer_norm_rows
};

/// Forward rule for one primitive without recording anything.
/// Throws ShapeError naming the kind and offending shapes.
Tensor evaluate(Op op, const std::vector<Tensor>& inputs, const OpAttrs& attrs = {});

/// A learnable tensor with its gradient accumulator.
///
/// The accumulator is written by Tape::backward through const references so
/// that forward passes over a frozen parameter set can share the object.
class Parameter {
 public:
  Parameter(std::string name, Tensor value);
  Parameter(const Parameter&) = delete;
  Parameter& operator=(const Parameter&) = delete;

  const std::string& name() const noexcept { return name_; }
  std::uint64_t id() const noexcept { return id_; }
  Tensor& value() noexcept { return value_; }
  const Tensor& value() const noexcept { return value_; }
  Tensor& grad() const noexcept { return grad_; }
  void zero_grad() const { grad_.fill(0.0); }

 private:
  std::string name_;
  std::uint64_t id_;
  Tensor value_;
  mutable Tensor grad_;
};

struct NodeId {
  std::uint32_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  NodeId id;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Records primitive applications in topological order and runs the reverse sweep.
class Tape {
 public:
  enum class NodeSource : std::uint8_t { constant, parameter, primitive };

  struct Node {
    NodeSource source = NodeSource::constant;
    Op kind = Op::add;
    std::vector<NodeId> inputs;
    OpAttrs attrs;
    Tensor value;
    Tensor saved;  // extra activations kept for the backward rule
    const Parameter* param = nullptr;
  };

  /// In checked mode every primitive rejects non-finite inputs.
  explicit Tape(bool checked = true) : checked_(checked) {}

  Var constant(Tensor value);
  Var parameter(const Parameter& param);
  Var record(Op op, std::initializer_list<Var> inputs, const OpAttrs& attrs = {});
  Var record(Op op, const std::vector<NodeId>& inputs, const OpAttrs& attrs = {});

  const Tensor& value(NodeId id) const;
  const Node& node(NodeId id) const;
  std::size_t size() const noexcept { return nodes_.size(); }
  bool checked() const noexcept { return checked_; }

  /// Reverse sweep from `output` seeded with `seed`; parameter gradients
  /// accumulate (+=). Intermediate gradients are freed as the sweep passes them.
  void backward(NodeId output, const Tensor& seed);
  void backward(Var output);  // seed of ones

  /// Recompute every primitive from the leaves, re-reading parameter values.
  void replay();

  /// One flag per relu input element: whether the element is > 0.
  std::vector<std::uint8_t> kink_pattern() const;

 private:
  Var push(Node node);

  bool checked_;
  std::vector<Node> nodes_;
};

Var matmul(Var a, Var b);
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);  // elementwise
Var operator*(double factor, Var a);
Var relu(Var a);
Var sigmoid(Var a);
Var tanh(Var a);
Var exp(Var a);
Var log(Var a);
Var softmax_rows(Var a, bool causal = false);
Var concat_cols(const std::vector<Var>& parts);
Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end);
Var transpose(Var a);
Var sum(Var a);
Var mean(Var a);
Var broadcast_row(Var row, std::size_t rows);
Var layer_norm_rows(Var a, double epsilon = 1e-5);

/// Row concatenation expressed with the catalog (transpose, concat, transpose).
Var concat_rows(const std::vector<Var>& parts);

}  // namespace dualtalker

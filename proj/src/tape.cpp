// SPDX-License-Identifier: Apache-2.0
#include "dualtalker/tape.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>

#include "dualtalker/errors.hpp"

namespace dualtalker {

std::string_view op_name(Op op) {
  switch (op) {
    case Op::matmul: return "matmul";
    case Op::add: return "add";
    case Op::subtract: return "subtract";
    case Op::multiply: return "elementwise-multiply";
    case Op::scale: return "scalar-multiply";
    case Op::relu: return "relu";
    case Op::sigmoid: return "sigmoid";
    case Op::tanh: return "tanh";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::softmax_rows: return "softmax-per-row";
    case Op::concat_cols: return "concat-last-axis";
    case Op::slice: return "slice";
    case Op::transpose: return "transpose-last-two";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::broadcast_row: return "broadcast-row";
    case Op::layer_norm_rows: return "layer-normalize-per-row";
  }
  return "unknown";
}

namespace {

using Inputs = std::vector<const Tensor*>;

[[noreturn]] void shape_fail(Op op, const Inputs& in, const std::string& detail = {}) {
  std::string msg = std::string(op_name(op)) + ": incompatible shapes";
  for (const Tensor* t : in) msg += " " + shape_string(t->shape());
  if (!detail.empty()) msg += " (" + detail + ")";
  throw ShapeError(msg);
}

void expect_arity(Op op, const Inputs& in, std::size_t n) {
  if (in.size() != n)
    throw ShapeError(std::string(op_name(op)) + ": expected " + std::to_string(n) + " inputs, got " +
                     std::to_string(in.size()));
}

void expect_rank2(Op op, const Inputs& in) {
  for (const Tensor* t : in)
    if (t->rank() != 2) shape_fail(op, in, "rank-2 operands required");
}

// C = A * B, A: n x k, B: k x m.
void gemm_nn(const Tensor& a, const Tensor& b, Tensor& c) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = pc + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      const double* brow = pb + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// C += A * B^T, A: n x k, B: m x k.
void gemm_nt(const Tensor& a, const Tensor& b, Tensor& c) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = pa + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const double* brow = pb + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      pc[i * m + j] += acc;
    }
  }
}

// C += A^T * B, A: k x n, B: k x m.
void gemm_tn(const Tensor& a, const Tensor& b, Tensor& c) {
  const std::size_t k = a.rows(), n = a.cols(), m = b.cols();
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = pb + p * m;
    for (std::size_t i = 0; i < n; ++i) {
      const double av = pa[p * n + i];
      if (av == 0.0) continue;
      double* crow = pc + i * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class F>
Tensor map_unary(const Tensor& x, F f) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return y;
}

Tensor forward_rule(Op op, const Inputs& in, const OpAttrs& attrs, Tensor* saved) {
  switch (op) {
    case Op::matmul: {
      expect_arity(op, in, 2);
      expect_rank2(op, in);
      if (in[0]->cols() != in[1]->rows()) shape_fail(op, in, "inner dimensions differ");
      Tensor c({in[0]->rows(), in[1]->cols()});
      gemm_nn(*in[0], *in[1], c);
      return c;
    }
    case Op::add:
    case Op::subtract:
    case Op::multiply: {
      expect_arity(op, in, 2);
      if (in[0]->shape() != in[1]->shape()) shape_fail(op, in);
      Tensor c(in[0]->shape());
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      if (op == Op::add)
        for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] + b[i];
      else if (op == Op::subtract)
        for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] - b[i];
      else
        for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] * b[i];
      return c;
    }
    case Op::scale: {
      expect_arity(op, in, 1);
      const double f = attrs.factor;
      return map_unary(*in[0], [f](double v) { return f * v; });
    }
    case Op::relu:
      expect_arity(op, in, 1);
      return map_unary(*in[0], [](double v) { return v > 0.0 ? v : 0.0; });
    case Op::sigmoid:
      expect_arity(op, in, 1);
      return map_unary(*in[0], [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      });
    case Op::tanh:
      expect_arity(op, in, 1);
      return map_unary(*in[0], [](double v) { return std::tanh(v); });
    case Op::exp:
      expect_arity(op, in, 1);
      return map_unary(*in[0], [](double v) { return std::exp(v); });
    case Op::log: {
      expect_arity(op, in, 1);
      for (double v : in[0]->values())
        if (!(v > 0.0)) throw NumericError("log: non-positive input");
      return map_unary(*in[0], [](double v) { return std::log(v); });
    }
    case Op::softmax_rows: {
      expect_arity(op, in, 1);
      expect_rank2(op, in);
      const Tensor& x = *in[0];
      const std::size_t n = x.rows(), m = x.cols();
      if (attrs.causal && n > m) shape_fail(op, in, "causal mask needs cols >= rows");
      Tensor y(x.shape());
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t live = attrs.causal ? i + 1 : m;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < live; ++j) mx = std::max(mx, x.at(i, j));
        double total = 0.0;
        for (std::size_t j = 0; j < live; ++j) {
          const double e = std::exp(x.at(i, j) - mx);
          y.at(i, j) = e;
          total += e;
        }
        for (std::size_t j = 0; j < live; ++j) y.at(i, j) /= total;
      }
      return y;
    }
    case Op::concat_cols: {
      if (in.empty()) throw ShapeError("concat-last-axis: no inputs");
      expect_rank2(op, in);
      const std::size_t n = in[0]->rows();
      std::size_t total = 0;
      for (const Tensor* t : in) {
        if (t->rows() != n) shape_fail(op, in, "row counts differ");
        total += t->cols();
      }
      Tensor y({n, total});
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t off = 0;
        for (const Tensor* t : in) {
          std::copy_n(t->data() + i * t->cols(), t->cols(), y.data() + i * total + off);
          off += t->cols();
        }
      }
      return y;
    }
    case Op::slice: {
      expect_arity(op, in, 1);
      expect_rank2(op, in);
      const Tensor& x = *in[0];
      if (attrs.axis > 1) shape_fail(op, in, "axis must be 0 or 1");
      const std::size_t extent = attrs.axis == 0 ? x.rows() : x.cols();
      if (attrs.begin >= attrs.end || attrs.end > extent)
        shape_fail(op, in, "range [" + std::to_string(attrs.begin) + "," + std::to_string(attrs.end) + ")");
      const std::size_t len = attrs.end - attrs.begin;
      if (attrs.axis == 0) {
        Tensor y({len, x.cols()});
        std::copy_n(x.data() + attrs.begin * x.cols(), len * x.cols(), y.data());
        return y;
      }
      Tensor y({x.rows(), len});
      for (std::size_t i = 0; i < x.rows(); ++i)
        std::copy_n(x.data() + i * x.cols() + attrs.begin, len, y.data() + i * len);
      return y;
    }
    case Op::transpose: {
      expect_arity(op, in, 1);
      expect_rank2(op, in);
      const Tensor& x = *in[0];
      Tensor y({x.cols(), x.rows()});
      for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) y.at(j, i) = x.at(i, j);
      return y;
    }
    case Op::sum:
    case Op::mean: {
      expect_arity(op, in, 1);
      double total = 0.0;
      for (double v : in[0]->values()) total += v;
      if (op == Op::mean) total /= static_cast<double>(in[0]->size());
      return Tensor::scalar(total);
    }
    case Op::broadcast_row: {
      expect_arity(op, in, 1);
      const Tensor& x = *in[0];
      if (!(x.rank() == 1 || (x.rank() == 2 && x.rows() == 1)) || attrs.rows == 0)
        shape_fail(op, in, "expects a single row and rows > 0");
      const std::size_t m = x.size();
      Tensor y({attrs.rows, m});
      for (std::size_t i = 0; i < attrs.rows; ++i) std::copy_n(x.data(), m, y.data() + i * m);
      return y;
    }
    case Op::layer_norm_rows: {
      expect_arity(op, in, 1);
      expect_rank2(op, in);
      const Tensor& x = *in[0];
      const std::size_t n = x.rows(), m = x.cols();
      Tensor y(x.shape());
      Tensor inv({n});
      for (std::size_t i = 0; i < n; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < m; ++j) mu += x.at(i, j);
        mu /= static_cast<double>(m);
        double var = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
          const double c = x.at(i, j) - mu;
          var += c * c;
        }
        var /= static_cast<double>(m);
        const double r = 1.0 / std::sqrt(var + attrs.epsilon);
        inv[i] = r;
        for (std::size_t j = 0; j < m; ++j) y.at(i, j) = (x.at(i, j) - mu) * r;
      }
      if (saved) *saved = std::move(inv);
      return y;
    }
  }
  throw ShapeError("unknown primitive");
}

void accumulate(Tensor& target, const Tensor& delta) {
  if (target.empty()) {
    target = delta;
    return;
  }
  for (std::size_t i = 0; i < target.size(); ++i) target[i] += delta[i];
}

// Gradient contributions for each input of a primitive given the output gradient.
std::vector<Tensor> backward_rule(const Tape::Node& node, const Inputs& in, const Tensor& gy) {
  const Tensor& y = node.value;
  std::vector<Tensor> gx;
  gx.reserve(in.size());
  switch (node.kind) {
    case Op::matmul: {
      Tensor ga(in[0]->shape()), gb(in[1]->shape());
      gemm_nt(gy, *in[1], ga);
      gemm_tn(*in[0], gy, gb);
      gx.push_back(std::move(ga));
      gx.push_back(std::move(gb));
      break;
    }
    case Op::add:
      gx.push_back(gy);
      gx.push_back(gy);
      break;
    case Op::subtract:
      gx.push_back(gy);
      gx.push_back(map_unary(gy, [](double v) { return -v; }));
      break;
    case Op::multiply: {
      Tensor ga(gy.shape()), gb(gy.shape());
      for (std::size_t i = 0; i < gy.size(); ++i) {
        ga[i] = gy[i] * (*in[1])[i];
        gb[i] = gy[i] * (*in[0])[i];
      }
      gx.push_back(std::move(ga));
      gx.push_back(std::move(gb));
      break;
    }
    case Op::scale: {
      const double f = node.attrs.factor;
      gx.push_back(map_unary(gy, [f](double v) { return f * v; }));
      break;
    }
    case Op::relu: {
      Tensor g(gy.shape());
      for (std::size_t i = 0; i < gy.size(); ++i) g[i] = (*in[0])[i] > 0.0 ? gy[i] : 0.0;
      gx.push_back(std::move(g));
      break;
    }
    case Op::sigmoid: {
      Tensor g(gy.shape());
      for (std::size_t i = 0; i < gy.size(); ++i) g[i] = gy[i] * y[i] * (1.0 - y[i]);
      gx.push_back(std::move(g));
      break;
    }
    case Op::tanh: {
      Tensor g(gy.shape());
      for (std::size_t i = 0; i < gy.size(); ++i) g[i] = gy[i] * (1.0 - y[i] * y[i]);
      gx.push_back(std::move(g));
      break;
    }
    case Op::exp: {
      Tensor g(gy.shape());
      for (std::size_t i = 0; i < gy.size(); ++i) g[i] = gy[i] * y[i];
      gx.push_back(std::move(g));
      break;
    }
    case Op::log: {
      Tensor g(gy.shape());
      for (std::size_t i = 0; i < gy.size(); ++i) g[i] = gy[i] / (*in[0])[i];
      gx.push_back(std::move(g));
      break;
    }
    case Op::softmax_rows: {
      const std::size_t n = y.rows(), m = y.cols();
      Tensor g(y.shape());
      for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < m; ++j) dot += gy.at(i, j) * y.at(i, j);
        for (std::size_t j = 0; j < m; ++j) g.at(i, j) = y.at(i, j) * (gy.at(i, j) - dot);
      }
      gx.push_back(std::move(g));
      break;
    }
    case Op::concat_cols: {
      const std::size_t n = gy.rows(), total = gy.cols();
      std::size_t off = 0;
      for (const Tensor* t : in) {
        Tensor g(t->shape());
        for (std::size_t i = 0; i < n; ++i)
          std::copy_n(gy.data() + i * total + off, t->cols(), g.data() + i * t->cols());
        off += t->cols();
        gx.push_back(std::move(g));
      }
      break;
    }
    case Op::slice: {
      const Tensor& x = *in[0];
      Tensor g(x.shape());
      const auto& a = node.attrs;
      const std::size_t len = a.end - a.begin;
      if (a.axis == 0) {
        std::copy_n(gy.data(), len * x.cols(), g.data() + a.begin * x.cols());
      } else {
        for (std::size_t i = 0; i < x.rows(); ++i)
          std::copy_n(gy.data() + i * len, len, g.data() + i * x.cols() + a.begin);
      }
      gx.push_back(std::move(g));
      break;
    }
    case Op::transpose: {
      Tensor g(in[0]->shape());
      for (std::size_t i = 0; i < gy.rows(); ++i)
        for (std::size_t j = 0; j < gy.cols(); ++j) g.at(j, i) = gy.at(i, j);
      gx.push_back(std::move(g));
      break;
    }
    case Op::sum:
      gx.emplace_back(in[0]->shape(), gy[0]);
      break;
    case Op::mean:
      gx.emplace_back(in[0]->shape(), gy[0] / static_cast<double>(in[0]->size()));
      break;
    case Op::broadcast_row: {
      Tensor g(in[0]->shape());
      const std::size_t m = g.size();
      for (std::size_t i = 0; i < gy.rows(); ++i)
        for (std::size_t j = 0; j < m; ++j) g[j] += gy.at(i, j);
      gx.push_back(std::move(g));
      break;
    }
    case Op::layer_norm_rows: {
      const std::size_t n = y.rows(), m = y.cols();
      Tensor g(y.shape());
      for (std::size_t i = 0; i < n; ++i) {
        double mg = 0.0, mgy = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
          mg += gy.at(i, j);
          mgy += gy.at(i, j) * y.at(i, j);
        }
        mg /= static_cast<double>(m);
        mgy /= static_cast<double>(m);
        const double r = node.saved[i];
        for (std::size_t j = 0; j < m; ++j) g.at(i, j) = r * (gy.at(i, j) - mg - y.at(i, j) * mgy);
      }
      gx.push_back(std::move(g));
      break;
    }
  }
  return gx;
}

std::atomic<std::uint64_t> next_parameter_id{1};

}  // namespace

Tensor evaluate(Op op, const std::vector<Tensor>& inputs, const OpAttrs& attrs) {
  Inputs in;
  in.reserve(inputs.size());
  for (const Tensor& t : inputs) in.push_back(&t);
  return forward_rule(op, in, attrs, nullptr);
}

Parameter::Parameter(std::string name, Tensor value)
    : name_(std::move(name)), id_(next_parameter_id++), value_(std::move(value)), grad_(value_.shape()) {}

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::push(Node node) {
  if (nodes_.size() >= std::numeric_limits<std::uint32_t>::max()) throw Error("tape is full");
  nodes_.push_back(std::move(node));
  return Var{this, NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)}};
}

Var Tape::constant(Tensor value) {
  if (checked_ && !value.all_finite()) throw NumericError("non-finite constant recorded on tape");
  Node n;
  n.source = NodeSource::constant;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::parameter(const Parameter& param) {
  if (checked_ && !param.value().all_finite())
    throw NumericError("parameter '" + param.name() + "' holds non-finite values");
  Node n;
  n.source = NodeSource::parameter;
  n.param = &param;
  n.value = param.value();
  return push(std::move(n));
}

Var Tape::record(Op op, std::initializer_list<Var> inputs, const OpAttrs& attrs) {
  std::vector<NodeId> ids;
  ids.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (v.tape != this) throw DanglingNodeError(std::string(op_name(op)) + ": input belongs to another tape");
    ids.push_back(v.id);
  }
  return record(op, ids, attrs);
}

Var Tape::record(Op op, const std::vector<NodeId>& inputs, const OpAttrs& attrs) {
  Inputs in;
  in.reserve(inputs.size());
  for (NodeId id : inputs) {
    if (id.index >= nodes_.size())
      throw DanglingNodeError(std::string(op_name(op)) + ": input node " + std::to_string(id.index) +
                              " was never recorded");
    const Tensor& t = nodes_[id.index].value;
    if (checked_ && !t.all_finite())
      throw NumericError(std::string(op_name(op)) + ": non-finite input " + shape_string(t.shape()));
    in.push_back(&t);
  }
  Node n;
  n.source = NodeSource::primitive;
  n.kind = op;
  n.inputs = inputs;
  n.attrs = attrs;
  n.value = forward_rule(op, in, attrs, &n.saved);
  return push(std::move(n));
}

const Tensor& Tape::value(NodeId id) const { return node(id).value; }

const Tape::Node& Tape::node(NodeId id) const {
  if (id.index >= nodes_.size())
    throw DanglingNodeError("node " + std::to_string(id.index) + " was never recorded");
  return nodes_[id.index];
}

void Tape::backward(Var output) { backward(output.id, Tensor(value(output.id).shape(), 1.0)); }

void Tape::backward(NodeId output, const Tensor& seed) {
  if (output.index >= nodes_.size())
    throw DanglingNodeError("backward from node " + std::to_string(output.index) + " which was never recorded");
  if (seed.shape() != nodes_[output.index].value.shape())
    throw ShapeError("seed shape " + shape_string(seed.shape()) + " differs from output shape " +
                     shape_string(nodes_[output.index].value.shape()));

  std::vector<Tensor> grads(output.index + 1);
  grads[output.index] = seed;
  for (std::size_t i = output.index + 1; i-- > 0;) {
    if (grads[i].empty()) continue;
    const Node& n = nodes_[i];
    if (n.source == NodeSource::parameter) {
      accumulate(n.param->grad(), grads[i]);
    } else if (n.source == NodeSource::primitive) {
      Inputs in;
      in.reserve(n.inputs.size());
      for (NodeId id : n.inputs) {
        if (id.index >= i) throw DanglingNodeError("tape is not topologically ordered");
        in.push_back(&nodes_[id.index].value);
      }
      std::vector<Tensor> contributions = backward_rule(n, in, grads[i]);
      for (std::size_t k = 0; k < n.inputs.size(); ++k) accumulate(grads[n.inputs[k].index], contributions[k]);
    }
    grads[i] = Tensor();
  }
}

void Tape::replay() {
  for (Node& n : nodes_) {
    if (n.source == NodeSource::parameter) {
      n.value = n.param->value();
    } else if (n.source == NodeSource::primitive) {
      Inputs in;
      in.reserve(n.inputs.size());
      for (NodeId id : n.inputs) in.push_back(&nodes_[id.index].value);
      n.value = forward_rule(n.kind, in, n.attrs, &n.saved);
    }
  }
}

std::vector<std::uint8_t> Tape::kink_pattern() const {
  std::vector<std::uint8_t> pattern;
  for (const Node& n : nodes_) {
    if (n.source != NodeSource::primitive || n.kind != Op::relu) continue;
    for (double v : nodes_[n.inputs[0].index].value.values()) pattern.push_back(v > 0.0 ? 1 : 0);
  }
  return pattern;
}

Var matmul(Var a, Var b) { return a.tape->record(Op::matmul, {a, b}); }
Var operator+(Var a, Var b) { return a.tape->record(Op::add, {a, b}); }
Var operator-(Var a, Var b) { return a.tape->record(Op::subtract, {a, b}); }
Var operator*(Var a, Var b) { return a.tape->record(Op::multiply, {a, b}); }
Var operator*(double factor, Var a) {
  OpAttrs attrs;
  attrs.factor = factor;
  return a.tape->record(Op::scale, {a}, attrs);
}
Var relu(Var a) { return a.tape->record(Op::relu, {a}); }
Var sigmoid(Var a) { return a.tape->record(Op::sigmoid, {a}); }
Var tanh(Var a) { return a.tape->record(Op::tanh, {a}); }
Var exp(Var a) { return a.tape->record(Op::exp, {a}); }
Var log(Var a) { return a.tape->record(Op::log, {a}); }
Var softmax_rows(Var a, bool causal) {
  OpAttrs attrs;
  attrs.causal = causal;
  return a.tape->record(Op::softmax_rows, {a}, attrs);
}
Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat-last-axis: no inputs");
  std::vector<NodeId> ids;
  for (const Var& v : parts) ids.push_back(v.id);
  return parts.front().tape->record(Op::concat_cols, ids);
}
Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  OpAttrs attrs;
  attrs.axis = axis;
  attrs.begin = begin;
  attrs.end = end;
  return a.tape->record(Op::slice, {a}, attrs);
}
Var transpose(Var a) { return a.tape->record(Op::transpose, {a}); }
Var sum(Var a) { return a.tape->record(Op::sum, {a}); }
Var mean(Var a) { return a.tape->record(Op::mean, {a}); }
Var broadcast_row(Var row, std::size_t rows) {
  OpAttrs attrs;
  attrs.rows = rows;
  return row.tape->record(Op::broadcast_row, {row}, attrs);
}
Var layer_norm_rows(Var a, double epsilon) {
  OpAttrs attrs;
  attrs.epsilon = epsilon;
  return a.tape->record(Op::layer_norm_rows, {a}, attrs);
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.size() == 1) return parts.front();
  std::vector<Var> transposed;
  transposed.reserve(parts.size());
  for (const Var& v : parts) transposed.push_back(transpose(v));
  return transpose(concat_cols(transposed));
}

}  // namespace dualtalker

// SPDX-License-Identifier: Apache-2.0
#include "dualtalker/suite.hpp"

#include <algorithm>
#include <cstdio>
#include <memory>

#include "dualtalker/errors.hpp"
#include "dualtalker/losses.hpp"
#include "dualtalker/model.hpp"
#include "dualtalker/rng.hpp"

namespace dualtalker {

GradScope parse_scope(const std::string& name) {
  if (name == "op") return GradScope::op;
  if (name == "block") return GradScope::block;
  if (name == "full") return GradScope::full;
  throw ConfigError("unknown gradcheck scope '" + name + "' (expected op, block or full)");
}

bool GradSuiteResult::passed() const {
  return std::all_of(reports.begin(), reports.end(), [](const GradientReport& r) { return r.passed(); });
}

std::size_t GradSuiteResult::checked() const {
  std::size_t n = 0;
  for (const auto& r : reports) n += r.checked;
  return n;
}

std::size_t GradSuiteResult::excluded() const {
  std::size_t n = 0;
  for (const auto& r : reports) n += r.excluded;
  return n;
}

double GradSuiteResult::max_relative_error() const {
  double m = 0.0;
  for (const auto& r : reports) m = std::max(m, r.max_relative_error);
  return m;
}

std::string GradSuiteResult::summary() const {
  std::string out;
  char line[256];
  for (const auto& r : reports) {
    std::snprintf(line, sizeof line, "%-4s %-36s checked=%-5zu excluded=%-3zu max_rel=%.3e\n",
                  r.passed() ? "ok" : "FAIL", r.label.c_str(), r.checked, r.excluded, r.max_relative_error);
    out += line;
    if (!r.passed()) {
      for (const auto& e : r.worst) {
        std::snprintf(line, sizeof line, "       %s[%zu] analytic=% .9e numeric=% .9e rel=%.3e\n",
                      e.parameter.c_str(), e.index, e.analytic, e.numeric, e.relative_error);
        out += line;
      }
    }
  }
  return out;
}

namespace {

using ParamList = std::vector<std::unique_ptr<Parameter>>;

std::vector<Parameter*> raw(const ParamList& list) {
  std::vector<Parameter*> out;
  for (const auto& p : list) out.push_back(p.get());
  return out;
}

/// Scalar <out, R> with a fixed random R so every output entry matters.
Var project(Tape& tape, Var out, const Tensor& weights) { return sum(out * tape.constant(weights)); }

class Runner {
 public:
  Runner(double tolerance, std::uint64_t seed) : tol_(tolerance), rng_(seed) {}

  void run_ops() {
    for (Op op : kAllOps) {
      for (int trial = 0; trial < 3; ++trial) op_case(op, trial);
    }
  }

  void run_blocks() {
    ModelConfig cfg;
    cfg.d = 4;
    cfg.audio_dim = 4;
    cfg.heads = 2;
    cfg.self_heads = 2;
    cfg.squeeze_ratio = 2;
    cfg.ff_dim = 8;
    cfg.vertices = 6;
    cfg.speakers = 2;
    cfg.max_frames = 4;
    for (bool tied : {false, true}) {
      cfg.share_transpose_codec = tied;
      block_cases(cfg);
    }
  }

  void run_losses() {
    const std::size_t t = 4, d = 3, v = 3;
    ParamList p;
    auto add = [&](const char* name, Shape s, double sd = 1.0) {
      p.push_back(std::make_unique<Parameter>(name, rng_.normal_tensor(s, sd)));
      return p.back().get();
    };
    Parameter* a = add("a", {t, d});
    Parameter* b = add("b", {t, d});
    Parameter* c = add("c", {t, d});
    Parameter* e = add("e", {t, d});
    const Tensor target = rng_.normal_tensor({t, d}, 1.0);
    const Tensor motion = rng_.normal_tensor({t, 3 * v}, 1.0);

    check("loss mse", {a}, [&](Tape& tape) { return mse(tape.parameter(*a), tape.constant(target)); });
    check("loss smooth_l1", {a, b}, [&](Tape& tape) { return smooth_l1(tape.parameter(*a), tape.parameter(*b)); });
    check("loss duality_regularizer", {a, b, c, e}, [&](Tape& tape) {
      return duality_regularizer(tape.parameter(*a), tape.parameter(*b), tape.parameter(*c), tape.parameter(*e));
    });
    for (AnchorWeighting anchors : {AnchorWeighting::uniform, AnchorWeighting::kernel}) {
      CCRLConfig cc;
      cc.anchors = anchors;
      const std::string tag = anchors == AnchorWeighting::uniform ? " uniform" : " kernel";
      check("loss ccrl_direction" + tag, {a, b}, [&](Tape& tape) {
        return ccrl_direction(tape.parameter(*a), tape.parameter(*b), motion, cc);
      });
      check("loss ccrl_total" + tag, {a, b, c, e}, [&](Tape& tape) {
        return ccrl_total(tape.parameter(*a), tape.parameter(*b), tape.parameter(*c), tape.parameter(*e), motion, cc);
      });
    }
    CCRLConfig fixed;
    fixed.bandwidth = 0.7;
    check("loss ccrl_direction fixed bandwidth", {a, b}, [&](Tape& tape) {
      return ccrl_direction(tape.parameter(*a), tape.parameter(*b), motion, fixed);
    });

    ModelConfig cfg;
    cfg.d = 4;
    cfg.audio_dim = 4;
    cfg.heads = 2;
    cfg.self_heads = 2;
    cfg.squeeze_ratio = 2;
    cfg.ff_dim = 8;
    cfg.vertices = 6;
    cfg.speakers = 2;
    cfg.max_frames = 4;
    Model model(cfg, rng_.next());
    const Tensor features = rng_.uniform_tensor({3, cfg.audio_dim}, 0.0, 1.0);
    const Tensor flat = rng_.normal_tensor({3, 3 * cfg.vertices}, 0.5);
    const LossWeights unit{1.0, 1.0, 1.0, 1.0};
    check("loss total (unit weights)", model.parameters(), [&](Tape& tape) {
      Var x = model.encode_audio(tape, tape.constant(features));
      Var y = model.encode_motion(tape, tape.constant(flat));
      const TaskGraph primal = model.primal(tape, x, y, 1);
      const TaskGraph dual = model.dual(tape, y, x, 1);
      return total_loss(tape, primal, &dual, flat, features, unit, CCRLConfig{}).total;
    });
  }

  std::vector<GradientReport> take() { return std::move(reports_); }

 private:
  void check(const std::string& label, const std::vector<Parameter*>& params, const ComputationBuilder& build) {
    GradientReport r = check_gradients(params, build, tol_);
    r.label = label;
    reports_.push_back(std::move(r));
  }

  std::size_t dim() { return 1 + rng_.below(5); }

  void op_case(Op op, int trial) {
    ParamList p;
    auto make = [&](Shape s, double lo = -1.5, double hi = 1.5) {
      p.push_back(std::make_unique<Parameter>("in" + std::to_string(p.size()), rng_.uniform_tensor(s, lo, hi)));
      return p.back().get();
    };
    OpAttrs attrs;
    std::size_t r = dim(), c = dim();
    switch (op) {
      case Op::matmul: {
        const std::size_t k = dim();
        make({r, k});
        make({k, c});
        break;
      }
      case Op::add:
      case Op::subtract:
      case Op::multiply:
        make({r, c});
        make({r, c});
        break;
      case Op::scale:
        attrs.factor = rng_.uniform(-2.0, 2.0);
        make({r, c});
        break;
      case Op::log:
        make({r, c}, 0.3, 2.0);
        break;
      case Op::softmax_rows:
        attrs.causal = trial != 0;
        if (attrs.causal) {
          r = 2 + rng_.below(4);
          c = r + rng_.below(6 - r);
        }
        make({r, c}, -2.0, 2.0);
        break;
      case Op::concat_cols:
        for (std::size_t i = 0, n = 2 + trial; i < n; ++i) make({r, dim()});
        break;
      case Op::slice: {
        attrs.axis = static_cast<std::size_t>(trial % 2);
        const std::size_t extent = attrs.axis == 0 ? r : c;
        attrs.begin = rng_.below(extent);
        attrs.end = attrs.begin + 1 + rng_.below(extent - attrs.begin);
        make({r, c});
        break;
      }
      case Op::broadcast_row:
        attrs.rows = r;
        make({1, c});
        break;
      case Op::layer_norm_rows:
        make({r, std::max<std::size_t>(c, 2)});
        break;
      default:
        make({r, c});
        break;
    }
    std::vector<Parameter*> params = raw(p);
    const Tensor out_shape_probe = [&] {
      std::vector<Tensor> values;
      for (Parameter* q : params) values.push_back(q->value());
      return evaluate(op, values, attrs);
    }();
    const Tensor weights = rng_.normal_tensor(out_shape_probe.shape(), 1.0);
    std::string label = "op " + std::string(op_name(op));
    if (op == Op::softmax_rows && attrs.causal) label += " causal";
    if (op == Op::slice) label += attrs.axis == 0 ? " rows" : " cols";
    label += " #" + std::to_string(trial);
    check(label, params, [&](Tape& tape) {
      std::vector<NodeId> ids;
      for (Parameter* q : params) ids.push_back(tape.parameter(*q).id);
      return project(tape, tape.record(op, ids, attrs), weights);
    });
  }

  void block_cases(const ModelConfig& cfg) {
    Model model(cfg, rng_.next());
    const std::size_t t = 3;
    const std::string tag = cfg.share_transpose_codec ? " (tied codec)" : "";
    const Tensor features = rng_.uniform_tensor({t, cfg.audio_dim}, 0.0, 1.0);
    const Tensor flat = rng_.normal_tensor({t, 3 * cfg.vertices}, 0.5);
    const Tensor stream_in = rng_.normal_tensor({t, cfg.d}, 1.0);
    const Tensor other_in = rng_.normal_tensor({t, cfg.d}, 1.0);
    const Tensor w_d = rng_.normal_tensor({t, cfg.d}, 1.0);
    const Tensor w_motion = rng_.normal_tensor({t, 3 * cfg.vertices}, 1.0);
    const Tensor w_audio = rng_.normal_tensor({t, cfg.audio_dim}, 1.0);
    const auto& params = model.parameters();

    if (!cfg.share_transpose_codec) {
      check("block audio encoder", params,
            [&](Tape& tape) { return project(tape, model.encode_audio(tape, tape.constant(features)), w_d); });
      check("block motion encoder", params,
            [&](Tape& tape) { return project(tape, model.encode_motion(tape, tape.constant(flat)), w_d); });
      for (Direction dir : {Direction::primal, Direction::dual}) {
        const std::string name(direction_prefix(dir));
        check("block " + name + " shift_right", params, [&, dir](Tape& tape) {
          return project(tape, model.shift_right(tape, tape.constant(stream_in), dir), w_d);
        });
        check("block " + name + " self_attend", params, [&, dir](Tape& tape) {
          return project(tape, model.self_attend(tape, tape.constant(stream_in), dir), w_d);
        });
        check("block " + name + " speaker_modulate", params, [&, dir](Tape& tape) {
          Var s = model.style(tape, 1);
          return project(tape, model.speaker_modulate(tape, tape.constant(stream_in), s, dir), w_d);
        });
        for (bool causal : {true, false}) {
          check("block " + name + " cross_attend" + (causal ? " causal" : " full"), params, [&, dir, causal](Tape& tape) {
            return project(tape,
                           model.cross_attend(tape, tape.constant(stream_in), tape.constant(other_in), dir, causal),
                           w_d);
          });
        }
      }
    }
    check("block motion decoder" + tag, params,
          [&](Tape& tape) { return project(tape, model.decode_motion(tape, tape.constant(stream_in)), w_motion); });
    check("block audio decoder" + tag, params,
          [&](Tape& tape) { return project(tape, model.decode_audio(tape, tape.constant(stream_in)), w_audio); });
    check("block primal graph" + tag, params, [&](Tape& tape) {
      Var x = model.encode_audio(tape, tape.constant(features));
      Var y = model.encode_motion(tape, tape.constant(flat));
      const TaskGraph g = model.primal(tape, x, y, 0);
      return project(tape, g.prediction, w_motion) + project(tape, g.fused, w_d);
    });
    check("block dual graph" + tag, params, [&](Tape& tape) {
      Var x = model.encode_audio(tape, tape.constant(features));
      Var y = model.encode_motion(tape, tape.constant(flat));
      const TaskGraph g = model.dual(tape, y, x, 1);
      return project(tape, g.prediction, w_audio) + project(tape, g.fused, w_d);
    });
  }

  double tol_;
  Rng rng_;
  std::vector<GradientReport> reports_;
};

}  // namespace

GradSuiteResult run_gradient_suite(GradScope scope, double tolerance, std::uint64_t seed) {
  if (!(tolerance > 0.0)) throw ConfigError("gradcheck tolerance must be > 0");
  Runner runner(tolerance, seed);
  if (scope == GradScope::op || scope == GradScope::full) runner.run_ops();
  if (scope == GradScope::block || scope == GradScope::full) runner.run_blocks();
  if (scope == GradScope::full) runner.run_losses();
  return {runner.take()};
}

}  // namespace dualtalker

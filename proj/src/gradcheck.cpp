// SPDX-License-Identifier: Apache-2.0
#include "dualtalker/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "dualtalker/errors.hpp"

namespace dualtalker {

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

namespace {

struct Probe {
  double value;
  std::vector<std::uint8_t> kinks;
};

Probe probe(const ComputationBuilder& build) {
  Tape tape;
  Var out = build(tape);
  if (out.value().size() != 1) throw ShapeError("gradient check needs a scalar computation");
  return {out.value()[0], tape.kink_pattern()};
}

}  // namespace

GradientReport check_gradients(const std::vector<Parameter*>& params, const ComputationBuilder& build,
                               double tolerance, double step, std::size_t keep_worst) {
  GradientReport report;
  report.tolerance = tolerance;

  for (Parameter* p : params) p->zero_grad();
  std::vector<std::uint8_t> base_kinks;
  {
    Tape tape;
    Var out = build(tape);
    if (out.value().size() != 1) throw ShapeError("gradient check needs a scalar computation");
    tape.backward(out);
    base_kinks = tape.kink_pattern();
  }
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->grad());

  std::vector<GradientEntry> entries;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    for (std::size_t i = 0; i < p.value().size(); ++i) {
      const double saved = p.value()[i];
      p.value()[i] = saved + step;
      const Probe plus = probe(build);
      p.value()[i] = saved - step;
      const Probe minus = probe(build);
      p.value()[i] = saved;

      GradientEntry e;
      e.parameter = p.name();
      e.index = i;
      e.analytic = analytic[k][i];
      e.numeric = (plus.value - minus.value) / (2.0 * step);
      e.relative_error = relative_error(e.analytic, e.numeric);
      e.nondifferentiable = plus.kinks != base_kinks || minus.kinks != base_kinks;
      if (e.nondifferentiable) {
        ++report.excluded;
        report.flagged.push_back(e);
        continue;
      }
      ++report.checked;
      report.max_relative_error = std::max(report.max_relative_error, e.relative_error);
      entries.push_back(std::move(e));
    }
  }
  std::sort(entries.begin(), entries.end(),
            [](const GradientEntry& a, const GradientEntry& b) { return a.relative_error > b.relative_error; });
  if (entries.size() > keep_worst) entries.resize(keep_worst);
  report.worst = std::move(entries);
  for (Parameter* p : params) p->zero_grad();
  return report;
}

}  // namespace dualtalker

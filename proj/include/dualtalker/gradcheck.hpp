// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dualtalker/tape.hpp"

namespace dualtalker {

/// |a - n| / max(1e-8, |a| + |n|)
double relative_error(double analytic, double numeric);

struct GradientEntry {
  std::string parameter;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double relative_error = 0.0;
  bool nondifferentiable = false;  // the difference stencil crossed a relu kink
};

struct GradientReport {
  std::string label;
  double tolerance = 0.0;
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t excluded = 0;
  std::vector<GradientEntry> worst;    // largest errors first
  std::vector<GradientEntry> flagged;  // excluded from pass/fail

  bool passed() const { return max_relative_error < tolerance; }
};

/// Builds a scalar computation on the given tape from the current parameter values.
using ComputationBuilder = std::function<Var(Tape&)>;

/// Compares reverse-mode gradients against central differences
/// (f(θ+h) - f(θ-h)) / 2h for every entry of every parameter.
///
/// Entries whose stencil changes the on/off pattern of any relu are reported
/// as nondifferentiable and excluded. Parameter gradients are left zeroed.
GradientReport check_gradients(const std::vector<Parameter*>& params, const ComputationBuilder& build,
                               double tolerance, double step = 1e-5, std::size_t keep_worst = 5);

}  // namespace dualtalker

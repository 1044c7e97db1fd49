// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dualtalker/gradcheck.hpp"

namespace dualtalker {

enum class GradScope { op, block, full };

/// "op" | "block" | "full"; anything else raises ConfigError.
GradScope parse_scope(const std::string& name);

struct GradSuiteResult {
  std::vector<GradientReport> reports;

  bool passed() const;
  std::size_t checked() const;
  std::size_t excluded() const;
  double max_relative_error() const;
  std::string summary() const;
};

/// op: every primitive on random shapes up to 5x5.
/// block: model blocks and both task graphs at tiny sizes.
/// full: op + block + every loss term, with unit loss weights.
GradSuiteResult run_gradient_suite(GradScope scope, double tolerance, std::uint64_t seed = 7);

}  // namespace dualtalker

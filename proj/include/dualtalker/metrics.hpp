// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "dualtalker/data.hpp"

namespace dualtalker {

/// Sorted, unique vertex indices within [0, V).
struct RegionSet {
  std::string name;
  std::vector<std::size_t> indices;

  /// Sorts the indices; throws ArgumentError on duplicates, out-of-range entries or an empty set.
  static RegionSet make(std::string name, std::vector<std::size_t> indices, std::size_t vertex_count);
};

/// Mean over frames of the largest lip-vertex L2 error.
double lip_vertex_error(const MotionSequence& prediction, const MotionSequence& truth, const RegionSet& lips);

/// Population standard deviation over time of each region vertex's displacement magnitude.
std::vector<double> dyn(const MotionSequence& motion, const RegionSet& region);

/// Mean over region vertices of dyn(truth) - dyn(prediction); signed.
double fdd(const MotionSequence& truth, const MotionSequence& prediction, const RegionSet& upper);

/// Per-frame distance between the centroids of two vertex sets on absolute positions.
std::vector<double> lip_distance(const NeutralTemplate& templ, const MotionSequence& motion,
                                 const std::vector<std::size_t>& upper_lip, const std::vector<std::size_t>& lower_lip);

struct SequenceMetrics {
  std::string name;
  int speaker = 0;
  double lve = 0.0;
  double fdd = 0.0;
};

struct MetricReport {
  double lve = 0.0;
  double fdd = 0.0;      // mean of signed per-sequence values
  double fdd_abs = 0.0;  // mean of |per-sequence fdd|
  std::vector<SequenceMetrics> per_sequence;

  static MetricReport aggregate(std::vector<SequenceMetrics> rows);
  nlohmann::ordered_json to_json() const;
  std::string to_table() const;
};

}  // namespace dualtalker

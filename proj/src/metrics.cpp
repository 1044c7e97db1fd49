// SPDX-License-Identifier: Apache-2.0
#include "dualtalker/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "dualtalker/errors.hpp"

namespace dualtalker {

RegionSet RegionSet::make(std::string name, std::vector<std::size_t> indices, std::size_t vertex_count) {
  if (indices.empty()) throw ArgumentError("region '" + name + "' is empty");
  std::sort(indices.begin(), indices.end());
  if (std::adjacent_find(indices.begin(), indices.end()) != indices.end())
    throw ArgumentError("region '" + name + "' has duplicate indices");
  if (indices.back() >= vertex_count)
    throw ArgumentError("region '" + name + "' index " + std::to_string(indices.back()) + " >= V=" +
                        std::to_string(vertex_count));
  return RegionSet{std::move(name), std::move(indices)};
}

namespace {

void check_region(const RegionSet& region, std::size_t vertices) {
  if (region.indices.empty()) throw ArgumentError("region '" + region.name + "' is empty");
  for (std::size_t v : region.indices)
    if (v >= vertices) throw ArgumentError("region '" + region.name + "' exceeds the vertex count");
}

void check_pair(const MotionSequence& a, const MotionSequence& b) {
  if (a.displacements.shape() != b.displacements.shape())
    throw ShapeError("motion shapes differ: " + shape_string(a.displacements.shape()) + " vs " +
                     shape_string(b.displacements.shape()));
}

double norm3(const double* p) { return std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]); }

}  // namespace

double lip_vertex_error(const MotionSequence& prediction, const MotionSequence& truth, const RegionSet& lips) {
  check_pair(prediction, truth);
  check_region(lips, truth.vertices());
  const std::size_t frames = truth.frames(), stride = truth.vertices() * 3;
  double total = 0.0;
  for (std::size_t t = 0; t < frames; ++t) {
    double worst = 0.0;
    for (std::size_t v : lips.indices) {
      const double* p = prediction.displacements.data() + t * stride + v * 3;
      const double* g = truth.displacements.data() + t * stride + v * 3;
      const double diff[3] = {p[0] - g[0], p[1] - g[1], p[2] - g[2]};
      worst = std::max(worst, norm3(diff));
    }
    total += worst;
  }
  return total / static_cast<double>(frames);
}

std::vector<double> dyn(const MotionSequence& motion, const RegionSet& region) {
  if (motion.frames() < 2) throw ArgumentError("dyn: need at least 2 frames");
  check_region(region, motion.vertices());
  const std::size_t frames = motion.frames(), stride = motion.vertices() * 3;
  std::vector<double> out;
  out.reserve(region.indices.size());
  std::vector<double> magnitudes(frames);
  for (std::size_t v : region.indices) {
    double mu = 0.0;
    for (std::size_t t = 0; t < frames; ++t) {
      magnitudes[t] = norm3(motion.displacements.data() + t * stride + v * 3);
      mu += magnitudes[t];
    }
    mu /= static_cast<double>(frames);
    double var = 0.0;
    for (double m : magnitudes) var += (m - mu) * (m - mu);
    out.push_back(std::sqrt(var / static_cast<double>(frames)));
  }
  return out;
}

double fdd(const MotionSequence& truth, const MotionSequence& prediction, const RegionSet& upper) {
  check_pair(truth, prediction);
  const std::vector<double> a = dyn(truth, upper);
  const std::vector<double> b = dyn(prediction, upper);
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) total += a[i] - b[i];
  return total / static_cast<double>(a.size());
}

std::vector<double> lip_distance(const NeutralTemplate& templ, const MotionSequence& motion,
                                 const std::vector<std::size_t>& upper_lip,
                                 const std::vector<std::size_t>& lower_lip) {
  if (upper_lip.empty() || lower_lip.empty()) throw ArgumentError("lip_distance: empty lip set");
  const Tensor positions = motion_to_positions(templ, motion);
  const std::size_t stride = motion.vertices() * 3;
  auto centroid = [&](std::size_t t, const std::vector<std::size_t>& set, double* out) {
    out[0] = out[1] = out[2] = 0.0;
    for (std::size_t v : set)
      for (std::size_t c = 0; c < 3; ++c) out[c] += positions[t * stride + v * 3 + c];
    for (std::size_t c = 0; c < 3; ++c) out[c] /= static_cast<double>(set.size());
  };
  std::vector<double> out(motion.frames());
  for (std::size_t t = 0; t < motion.frames(); ++t) {
    double a[3], b[3];
    centroid(t, upper_lip, a);
    centroid(t, lower_lip, b);
    const double diff[3] = {a[0] - b[0], a[1] - b[1], a[2] - b[2]};
    out[t] = norm3(diff);
  }
  return out;
}

MetricReport MetricReport::aggregate(std::vector<SequenceMetrics> rows) {
  MetricReport r;
  if (!rows.empty()) {
    for (const auto& s : rows) {
      r.lve += s.lve;
      r.fdd += s.fdd;
      r.fdd_abs += std::abs(s.fdd);
    }
    const auto n = static_cast<double>(rows.size());
    r.lve /= n;
    r.fdd /= n;
    r.fdd_abs /= n;
  }
  r.per_sequence = std::move(rows);
  return r;
}

nlohmann::ordered_json MetricReport::to_json() const {
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const auto& s : per_sequence)
    rows.push_back({{"name", s.name}, {"speaker", s.speaker}, {"lve", s.lve}, {"fdd", s.fdd}});
  return {{"lve", lve}, {"fdd", fdd}, {"fdd_abs", fdd_abs}, {"per_sequence", std::move(rows)}};
}

std::string MetricReport::to_table() const {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof line, "%-20s %8s %14s %14s\n", "sequence", "speaker", "lve", "fdd");
  out += line;
  for (const auto& s : per_sequence) {
    std::snprintf(line, sizeof line, "%-20s %8d %14.6e %14.6e\n", s.name.c_str(), s.speaker, s.lve, s.fdd);
    out += line;
  }
  std::snprintf(line, sizeof line, "%-20s %8s %14.6e %14.6e\n", "mean", "", lve, fdd);
  out += line;
  std::snprintf(line, sizeof line, "%-20s %8s %14s %14.6e\n", "mean |fdd|", "", "", fdd_abs);
  out += line;
  return out;
}

}  // namespace dualtalker

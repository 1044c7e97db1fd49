// SPDX-License-Identifier: Apache-2.0
#include "dualtalker/losses.hpp"

#include <algorithm>
#include <cmath>

#include "dualtalker/errors.hpp"

namespace dualtalker {

void LossWeights::validate() const {
  for (double w : {primal, dual, duality, consistency})
    if (!std::isfinite(w) || w < 0.0) throw ConfigError("loss weights must be finite and nonnegative");
}

LossBundle combine_losses(double l_primal, double l_dual, double l_dr, double l_ccrl, const LossWeights& w) {
  LossBundle b{l_primal, l_dual, l_dr, l_ccrl, 0.0};
  b.total = w.primal * l_primal + w.dual * l_dual + w.duality * l_dr + w.consistency * l_ccrl;
  return b;
}

namespace {

void same_shape(Var a, Var b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shapes differ " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
}

Var filled(Tape& tape, Shape shape, double value) { return tape.constant(Tensor(std::move(shape), value)); }

}  // namespace

Var mse(Var prediction, Var target) {
  same_shape(prediction, target, "mse");
  Var diff = prediction - target;
  return mean(diff * diff);
}

Var smooth_l1(Var a, Var b) {
  same_shape(a, b, "smooth_l1");
  Tape& tape = *a.tape;
  Var x = a - b;
  Var magnitude = relu(x) + relu(-1.0 * x);
  Var ones = filled(tape, x.shape(), 1.0);
  // clipped = min(|x|, 1); h = clipped²/2 + |x| - clipped
  Var clipped = ones - relu(ones - magnitude);
  return mean(0.5 * (clipped * clipped) + magnitude - clipped);
}

Var duality_regularizer(Var audio_latent, Var audio_fused, Var motion_latent, Var motion_fused) {
  return smooth_l1(audio_latent, audio_fused) + smooth_l1(motion_latent, motion_fused);
}

double median_bandwidth(const Tensor& flat) {
  const std::size_t frames = flat.rows(), width = flat.cols();
  std::vector<double> distances;
  distances.reserve(frames * (frames - 1) / 2);
  for (std::size_t i = 0; i < frames; ++i)
    for (std::size_t j = i + 1; j < frames; ++j) {
      double sq = 0.0;
      for (std::size_t c = 0; c < width; ++c) {
        const double diff = flat.at(i, c) - flat.at(j, c);
        sq += diff * diff;
      }
      distances.push_back(std::sqrt(sq));
    }
  if (distances.empty()) return 1.0;
  std::sort(distances.begin(), distances.end());
  const std::size_t n = distances.size();
  const double median = n % 2 ? distances[n / 2] : 0.5 * (distances[n / 2 - 1] + distances[n / 2]);
  return median > 0.0 ? median : 1.0;
}

Tensor kernel_weights(const Tensor& flat, double bandwidth) {
  if (!(bandwidth > 0.0)) throw ArgumentError("kernel bandwidth must be positive");
  const std::size_t frames = flat.rows(), width = flat.cols();
  Tensor w({frames, frames});
  const double denom = 2.0 * bandwidth * bandwidth;
  for (std::size_t k = 0; k < frames; ++k)
    for (std::size_t t = 0; t < frames; ++t) {
      double sq = 0.0;
      for (std::size_t c = 0; c < width; ++c) {
        const double diff = flat.at(k, c) - flat.at(t, c);
        sq += diff * diff;
      }
      w.at(k, t) = std::exp(-sq / denom);
    }
  return w;
}

namespace {

// Rows scaled to unit length, norms floored at 1e-12.
Var normalize_rows(Var x) {
  Tape& tape = *x.tape;
  const std::size_t rows = x.rows(), cols = x.cols();
  Var squared_norms = matmul(x * x, filled(tape, {cols, 1}, 1.0));
  const double floor = 1e-24;
  Var floored = relu(squared_norms - filled(tape, {rows, 1}, floor)) + filled(tape, {rows, 1}, floor);
  Var inverse = exp(-0.5 * log(floored));
  return x * matmul(inverse, filled(tape, {1, cols}, 1.0));
}

}  // namespace

Var ccrl_direction(Var anchors, Var others, const Tensor& gt_flat_motion, const CCRLConfig& config) {
  same_shape(anchors, others, "ccrl");
  const std::size_t frames = anchors.rows();
  if (frames < 2) throw ArgumentError("ccrl: sequences need at least 2 frames");
  if (gt_flat_motion.rank() != 2 || gt_flat_motion.rows() != frames)
    throw ShapeError("ccrl: motion has " + shape_string(gt_flat_motion.shape()) + " for " + std::to_string(frames) +
                     " feature frames");
  Tape& tape = *anchors.tape;

  const double bandwidth = config.bandwidth ? *config.bandwidth : median_bandwidth(gt_flat_motion);
  const Tensor w = kernel_weights(gt_flat_motion, bandwidth);
  Tensor temperature({frames, frames}), off_diagonal({frames, frames}, 1.0), identity({frames, frames});
  for (std::size_t k = 0; k < frames; ++k) {
    for (std::size_t t = 0; t < frames; ++t) temperature.at(k, t) = 1.0 - w.at(k, t);
    off_diagonal.at(k, k) = 0.0;
    identity.at(k, k) = 1.0;
  }

  Var p = normalize_rows(anchors);
  Var q = normalize_rows(others);
  Var inter = matmul(p, transpose(q));  // s^inter[k][t] = cos(P_k, Q_t)
  Var intra = matmul(p, transpose(p));  // s^intra[k][t] = cos(P_k, P_t)
  Var temp = tape.constant(std::move(temperature));
  Var terms = (exp(inter * temp) + exp(intra * temp)) * tape.constant(std::move(off_diagonal));
  Var column_ones = filled(tape, {frames, 1}, 1.0);
  Var log_denominator = log(matmul(terms, column_ones));
  Var positive = matmul(inter * tape.constant(std::move(identity)), column_ones);
  Var per_anchor = log_denominator - positive;  // ℓ_k = -log(exp(s_k^inter) / s'_k)

  Tensor anchor_weight({frames, 1}, 1.0 / static_cast<double>(frames));
  if (config.anchors == AnchorWeighting::kernel) {
    double total = 0.0;
    for (std::size_t k = 0; k < frames; ++k) {
      double row = 0.0;
      for (std::size_t t = 0; t < frames; ++t)
        if (t != k) row += w.at(k, t);
      anchor_weight[k] = row / static_cast<double>(frames - 1);
      total += anchor_weight[k];
    }
    if (total > 0.0)
      for (double& a : anchor_weight.values()) a /= total;
    else
      anchor_weight.fill(1.0 / static_cast<double>(frames));
  }
  return sum(per_anchor * tape.constant(std::move(anchor_weight)));
}

Var ccrl_total(Var audio_latent, Var motion_latent, Var audio_fused, Var motion_fused, const Tensor& gt_flat_motion,
               const CCRLConfig& config) {
  return ccrl_direction(audio_latent, motion_latent, gt_flat_motion, config) +
         ccrl_direction(audio_fused, motion_fused, gt_flat_motion, config);
}

LossGraph total_loss(Tape& tape, const TaskGraph& primal, const TaskGraph* dual, const Tensor& gt_flat_motion,
                     const Tensor& gt_features, const LossWeights& weights, const CCRLConfig& ccrl) {
  weights.validate();
  Var l_primal = mse(primal.prediction, tape.constant(gt_flat_motion));
  LossGraph out;
  out.total = weights.primal * l_primal;
  if (!dual) {
    out.values = combine_losses(l_primal.value()[0], 0.0, 0.0, 0.0, weights);
    out.values.total = out.total.value()[0];
    return out;
  }
  Var l_dual = mse(dual->prediction, tape.constant(gt_features));
  Var l_dr = duality_regularizer(primal.audio_latent, dual->fused, primal.motion_latent, primal.fused);
  Var l_ccrl = ccrl_total(primal.audio_latent, primal.motion_latent, dual->fused, primal.fused, gt_flat_motion, ccrl);
  if (weights.dual != 0.0) out.total = out.total + weights.dual * l_dual;
  if (weights.duality != 0.0) out.total = out.total + weights.duality * l_dr;
  if (weights.consistency != 0.0) out.total = out.total + weights.consistency * l_ccrl;
  out.values = combine_losses(l_primal.value()[0], l_dual.value()[0], l_dr.value()[0], l_ccrl.value()[0], weights);
  out.values.total = out.total.value()[0];
  return out;
}

}  // namespace dualtalker

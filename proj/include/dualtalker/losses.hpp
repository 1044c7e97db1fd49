// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>

#include "dualtalker/model.hpp"
#include "dualtalker/tape.hpp"

namespace dualtalker {

/// λ1..λ4. Defaults are the BIWI settings.
struct LossWeights {
  double primal = 1.0;
  double dual = 1e-8;
  double duality = 1e-9;
  double consistency = 1e-6;

  void validate() const;
};

/// How per-anchor consistency losses are averaged.
enum class AnchorWeighting {
  uniform,  // (1/T) Σ_k ℓ_k
  kernel,   // anchors weighted by their mean kernel positiveness to the other frames
};

struct CCRLConfig {
  /// Gaussian kernel bandwidth σ_k; unset means the median pairwise frame
  /// distance of the ground-truth motion, recomputed per sequence.
  std::optional<double> bandwidth;
  AnchorWeighting anchors = AnchorWeighting::uniform;
};

struct LossBundle {
  double l_primal = 0.0;
  double l_dual = 0.0;
  double l_dr = 0.0;
  double l_ccrl = 0.0;
  double total = 0.0;
};

/// Weighted sum of already-evaluated components.
LossBundle combine_losses(double l_primal, double l_dual, double l_dr, double l_ccrl, const LossWeights& weights);

Var mse(Var prediction, Var target);
/// Mean Huber-style smooth L1 with β = 1.
Var smooth_l1(Var a, Var b);
/// smooth_l1(X, X̆) + smooth_l1(Y, Y̆)
Var duality_regularizer(Var audio_latent, Var audio_fused, Var motion_latent, Var motion_fused);

/// Median Frobenius distance over distinct frame pairs of a T x 3V motion; 1 when it is 0.
double median_bandwidth(const Tensor& flat_motion);
/// w[k][t] = exp(-|m_k - m_t|² / (2σ²)), T x T.
Tensor kernel_weights(const Tensor& flat_motion, double bandwidth);

/// Kernel-weighted contrastive consistency of P (anchors) against Q.
/// Kernel weights are constants; gradients flow into P and Q only.
Var ccrl_direction(Var anchors, Var others, const Tensor& gt_flat_motion, const CCRLConfig& config);
/// ccrl(X, Y) + ccrl(X̆, Y̆)
Var ccrl_total(Var audio_latent, Var motion_latent, Var audio_fused, Var motion_fused, const Tensor& gt_flat_motion,
               const CCRLConfig& config);

struct LossGraph {
  Var total;
  LossBundle values;
};

/// Builds every loss term for one training step. `dual` may be null when the
/// dual task is disabled, in which case only the primal term contributes.
/// Terms with zero weight are evaluated for reporting but kept off the total.
LossGraph total_loss(Tape& tape, const TaskGraph& primal, const TaskGraph* dual, const Tensor& gt_flat_motion,
                     const Tensor& gt_features, const LossWeights& weights, const CCRLConfig& ccrl);

}  // namespace dualtalker

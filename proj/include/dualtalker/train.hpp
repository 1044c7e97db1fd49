// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dualtalker/data.hpp"
#include "dualtalker/losses.hpp"
#include "dualtalker/metrics.hpp"
#include "dualtalker/model.hpp"

namespace dualtalker {

struct AblationSwitches {
  bool disable_dual = false;  // primal task only; λ2 = λ3 = λ4 = 0
  bool disable_ccrl = false;  // λ4 = 0
  bool disable_dr = false;    // λ3 = 0
  bool share_transpose_codec = false;
};

struct TrainConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t epochs = 100;
  std::size_t max_steps = 0;  // 0 = no cap
  std::uint64_t seed = 0;
  double clip_norm = 0.0;     // 0 = no gradient clipping
  LossWeights weights;
  CCRLConfig ccrl;
  AblationSwitches ablation;

  void validate() const;
  /// Weights after applying the ablation switches.
  LossWeights effective_weights() const;
};

/// Adam with bias correction. One moment pair per registered parameter.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
       double epsilon = 1e-8);

  /// Applies one update from the accumulated gradients, then zeroes them.
  void step();
  std::size_t steps() const noexcept { return step_; }
  std::size_t moment_count() const noexcept { return first_.size(); }
  const Tensor& first_moment(std::size_t i) const { return first_.at(i); }
  const Tensor& second_moment(std::size_t i) const { return second_.at(i); }

 private:
  std::vector<Parameter*> params_;
  double lr_, beta1_, beta2_, eps_;
  std::size_t step_ = 0;
  std::vector<Tensor> first_;
  std::vector<Tensor> second_;
};

/// Scales gradients so their global L2 norm is at most `max_norm`. Returns the pre-clip norm.
double clip_gradients(const std::vector<Parameter*>& params, double max_norm);

/// One teacher-forced joint step on a single sequence: both forward passes,
/// the loss bundle, one backward sweep and one Adam update.
/// Throws NumericError naming the offending term when a loss is not finite.
LossBundle train_step(Model& model, const Sequence& sequence, const TrainConfig& config, Adam& optimizer,
                      std::size_t step_index = 0);

/// Audio features resampled to the motion frame count when they differ.
FeatureSequence aligned_features(const Sequence& sequence);

struct StepRecord {
  std::size_t step = 0;
  LossBundle loss;
};

struct TrainResult {
  std::filesystem::path best_checkpoint;
  double best_val_lve = 0.0;
  std::vector<StepRecord> log;
  std::vector<double> epoch_val_lve;
  std::size_t steps = 0;
};

/// Checks that the model configuration fits the dataset.
void check_compatible(const ModelConfig& config, const Dataset& dataset);

/// Joint dual training. Writes train_log.jsonl and best.dtck under `out_dir`.
/// The model holds the best-validation parameters on return.
TrainResult train(Model& model, const Dataset& dataset, const TrainConfig& config,
                  const std::filesystem::path& out_dir,
                  const std::function<void(const StepRecord&)>& on_step = {});

/// Primal-only autoregressive evaluation. With `oracle` the ground truth is
/// used as the prediction.
MetricReport evaluate(const Model& model, const Dataset& dataset, const std::string& split, bool oracle = false);
MetricReport evaluate(const std::filesystem::path& checkpoint, const Dataset& dataset, const std::string& split);

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  double lve = 0.0;
  double fdd = 0.0;
  std::string checkpoint;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::string lip_distance_csv;

  std::string table() const;
  std::string csv() const;
  nlohmann::ordered_json to_json() const;
  /// Seeds where disable_dual has a higher val LVE than full.
  std::size_t dual_helps_count() const;
  std::size_t seed_count() const;
};

inline const std::vector<std::string>& ablation_variants() {
  static const std::vector<std::string> variants = {"full", "disable_dual", "disable_ccrl", "share_transpose_codec"};
  return variants;
}

/// Applies a named variant to base configurations.
void apply_variant(const std::string& variant, ModelConfig& model, TrainConfig& train);

/// Trains every variant for every seed with identical data and reports val metrics.
AblationResult ablate(const Dataset& dataset, const ModelConfig& model_config, const TrainConfig& base,
                      const std::vector<std::uint64_t>& seeds, const std::filesystem::path& out_dir);

}  // namespace dualtalker

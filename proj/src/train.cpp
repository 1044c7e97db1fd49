// SPDX-License-Identifier: Apache-2.0
#include "dualtalker/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "binary_io.hpp"
#include "dualtalker/errors.hpp"
#include "dualtalker/rng.hpp"

namespace dualtalker {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("Adam epsilon must be > 0");
  if (clip_norm < 0.0) throw ConfigError("clip_norm must be >= 0");
  if (ccrl.bandwidth && !(*ccrl.bandwidth > 0.0)) throw ConfigError("ccrl bandwidth must be > 0");
  weights.validate();
}

LossWeights TrainConfig::effective_weights() const {
  LossWeights w = weights;
  if (ablation.disable_dual) w.dual = w.duality = w.consistency = 0.0;
  if (ablation.disable_ccrl) w.consistency = 0.0;
  if (ablation.disable_dr) w.duality = 0.0;
  return w;
}

Adam::Adam(std::vector<Parameter*> params, double learning_rate, double beta1, double beta2, double epsilon)
    : params_(std::move(params)), lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(epsilon) {
  for (const Parameter* p : params_) {
    first_.emplace_back(p->value().shape());
    second_.emplace_back(p->value().shape());
  }
}

void Adam::step() {
  ++step_;
  const double correction1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
  const double correction2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Parameter& p = *params_[k];
    Tensor& m = first_[k];
    Tensor& v = second_[k];
    Tensor& g = p.grad();
    Tensor& x = p.value();
    for (std::size_t i = 0; i < x.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      x[i] -= lr_ * m_hat / (std::sqrt(v_hat) + eps_);
    }
    p.zero_grad();
  }
}

double clip_gradients(const std::vector<Parameter*>& params, double max_norm) {
  double sq = 0.0;
  for (const Parameter* p : params)
    for (double g : p->grad().values()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / norm;
    for (const Parameter* p : params)
      for (double& g : p->grad().values()) g *= factor;
  }
  return norm;
}

FeatureSequence aligned_features(const Sequence& sequence) {
  if (sequence.features.frames() == sequence.motion.frames()) return sequence.features;
  return resample_features(sequence.features, sequence.motion.frames());
}

namespace {

void check_finite(const LossBundle& b, std::size_t step) {
  const std::pair<const char*, double> terms[] = {
      {"l_primal", b.l_primal}, {"l_dual", b.l_dual}, {"l_dr", b.l_dr}, {"l_ccrl", b.l_ccrl}, {"total", b.total}};
  for (const auto& [name, value] : terms)
    if (!std::isfinite(value))
      throw NumericError("non-finite " + std::string(name) + " at step " + std::to_string(step) +
                         "; consider a lower learning rate or enabling clip_norm");
}

ordered_json loss_json(std::size_t step, const LossBundle& b) {
  return {{"step", step}, {"l_primal", b.l_primal}, {"l_dual", b.l_dual},
          {"l_dr", b.l_dr}, {"l_ccrl", b.l_ccrl},     {"total", b.total}};
}

ordered_json weights_json(const LossWeights& w) {
  return ordered_json::array({w.primal, w.dual, w.duality, w.consistency});
}

}  // namespace

LossBundle train_step(Model& model, const Sequence& sequence, const TrainConfig& config, Adam& optimizer,
                      std::size_t step_index) {
  const FeatureSequence features = aligned_features(sequence);
  const Tensor flat = sequence.motion.flattened();
  const LossWeights weights = config.effective_weights();

  Tape tape;
  Var x = model.encode_audio(tape, tape.constant(features.values));
  Var y = model.encode_motion(tape, tape.constant(flat));
  const TaskGraph primal = model.primal(tape, x, y, sequence.speaker);
  LossGraph loss;
  if (config.ablation.disable_dual) {
    loss = total_loss(tape, primal, nullptr, flat, features.values, weights, config.ccrl);
  } else {
    const TaskGraph dual = model.dual(tape, y, x, sequence.speaker);
    loss = total_loss(tape, primal, &dual, flat, features.values, weights, config.ccrl);
  }
  check_finite(loss.values, step_index);
  tape.backward(loss.total);
  if (config.clip_norm > 0.0) clip_gradients(model.parameters(), config.clip_norm);
  optimizer.step();
  return loss.values;
}

void check_compatible(const ModelConfig& config, const Dataset& dataset) {
  if (config.vertices != dataset.templ.vertex_count())
    throw ConfigError("model expects V=" + std::to_string(config.vertices) + ", dataset has " +
                      std::to_string(dataset.templ.vertex_count()));
  if (config.speakers < static_cast<std::size_t>(dataset.manifest.speakers))
    throw ConfigError("model has fewer speaker embeddings than the dataset has speakers");
  for (const auto& s : dataset.sequences) {
    if (s.features.dim() != config.audio_dim)
      throw ConfigError("model expects B=" + std::to_string(config.audio_dim) + ", '" + s.name + "' has " +
                        std::to_string(s.features.dim()));
    if (s.motion.frames() > config.max_frames)
      throw ConfigError("'" + s.name + "' is longer than max_frames");
  }
}

TrainResult train(Model& model, const Dataset& dataset, const TrainConfig& config, const fs::path& out_dir,
                  const std::function<void(const StepRecord&)>& on_step) {
  config.validate();
  check_compatible(model.config(), dataset);
  if (config.ablation.share_transpose_codec != model.config().share_transpose_codec)
    throw ConfigError("share_transpose_codec switch disagrees with the model configuration");
  const auto train_split = dataset.split("train");
  if (train_split.empty()) throw ArgumentError("train split is empty");
  const auto val_split = dataset.split("val");

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create '" + out_dir.string() + "': " + ec.message());
  std::ofstream log_file(out_dir / "train_log.jsonl", std::ios::trunc);
  if (!log_file) throw IoError("cannot write training log in '" + out_dir.string() + "'");

  Rng rng(config.seed);
  Adam optimizer(model.parameters(), config.learning_rate, config.beta1, config.beta2, config.epsilon);
  model.zero_grad();

  TrainResult result;
  result.best_checkpoint = out_dir / "best.dtck";
  result.best_val_lve = std::numeric_limits<double>::infinity();
  std::vector<Tensor> best_values;

  auto metadata = [&](std::size_t epoch) {
    return ordered_json{{"loss_weights", weights_json(config.weights)},
                        {"effective_loss_weights", weights_json(config.effective_weights())},
                        {"seed", config.seed},
                        {"epoch", epoch},
                        {"step", optimizer.steps()}};
  };

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    if (config.max_steps && step >= config.max_steps) break;
    for (std::size_t index : rng.permutation(train_split.size())) {
      if (config.max_steps && step >= config.max_steps) break;
      const LossBundle loss = train_step(model, *train_split[index], config, optimizer, step);
      StepRecord record{step, loss};
      log_file << loss_json(step, loss).dump() << '\n';
      result.log.push_back(record);
      if (on_step) on_step(record);
      ++step;
    }
    log_file.flush();

    const double val_lve = val_split.empty() ? -static_cast<double>(epoch) : evaluate(model, dataset, "val").lve;
    result.epoch_val_lve.push_back(val_lve);
    if (val_lve < result.best_val_lve) {
      result.best_val_lve = val_lve;
      best_values.clear();
      for (const Parameter* p : model.parameters()) best_values.push_back(p->value());
      save_checkpoint(result.best_checkpoint, model, metadata(epoch));
    }
  }
  result.steps = step;
  if (val_split.empty()) result.best_val_lve = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t k = 0; k < best_values.size(); ++k) model.parameters()[k]->value() = best_values[k];
  return result;
}

MetricReport evaluate(const Model& model, const Dataset& dataset, const std::string& split, bool oracle) {
  const auto sequences = dataset.split(split);
  if (sequences.empty()) throw ArgumentError("split '" + split + "' is empty");
  const std::size_t v = dataset.templ.vertex_count();
  const RegionSet lips = RegionSet::make("lips", dataset.manifest.lip_indices, v);
  const RegionSet upper = RegionSet::make("upper", dataset.manifest.upper_indices, v);
  std::vector<SequenceMetrics> rows;
  for (const Sequence* s : sequences) {
    const MotionSequence predicted =
        oracle ? s->motion : model.generate_motion(aligned_features(*s), s->speaker, s->motion.fps);
    rows.push_back({s->name, s->speaker, lip_vertex_error(predicted, s->motion, lips), fdd(s->motion, predicted, upper)});
  }
  return MetricReport::aggregate(std::move(rows));
}

MetricReport evaluate(const fs::path& checkpoint, const Dataset& dataset, const std::string& split) {
  const Model model = load_checkpoint(checkpoint);
  check_compatible(model.config(), dataset);
  return evaluate(model, dataset, split);
}

void apply_variant(const std::string& variant, ModelConfig& model, TrainConfig& train) {
  if (variant == "full") return;
  if (variant == "disable_dual") {
    train.ablation.disable_dual = true;
  } else if (variant == "disable_ccrl") {
    train.ablation.disable_ccrl = true;
  } else if (variant == "share_transpose_codec") {
    train.ablation.share_transpose_codec = true;
    model.share_transpose_codec = true;
  } else {
    throw ConfigError("unknown ablation variant '" + variant + "'");
  }
}

AblationResult ablate(const Dataset& dataset, const ModelConfig& model_config, const TrainConfig& base,
                      const std::vector<std::uint64_t>& seeds, const fs::path& out_dir) {
  if (seeds.empty()) throw ConfigError("ablate needs at least one seed");
  auto eval_split = dataset.split("val");
  const std::string split = eval_split.empty() ? "test" : "val";
  eval_split = dataset.split(split);
  if (eval_split.empty()) throw ArgumentError("ablate needs a val or test split");
  const Sequence& sample = *eval_split.front();
  const std::vector<std::size_t> upper_lip = dataset.manifest.upper_lip();
  const std::vector<std::size_t> lower_lip = dataset.manifest.lower_lip();

  AblationResult result;
  std::vector<std::vector<double>> curves;
  curves.push_back(lip_distance(dataset.templ, sample.motion, upper_lip, lower_lip));

  for (std::uint64_t seed : seeds) {
    for (const std::string& variant : ablation_variants()) {
      ModelConfig mc = model_config;
      mc.share_transpose_codec = false;
      TrainConfig tc = base;
      tc.ablation = AblationSwitches{};
      tc.seed = seed;
      apply_variant(variant, mc, tc);
      Model model(mc, seed);
      const fs::path run_dir = out_dir / (variant + "_seed" + std::to_string(seed));
      const TrainResult trained = train(model, dataset, tc, run_dir);
      const MetricReport report = evaluate(model, dataset, split);
      result.rows.push_back({variant, seed, report.lve, report.fdd, trained.best_checkpoint.string()});
      if (seed == seeds.front()) {
        const MotionSequence predicted =
            model.generate_motion(aligned_features(sample), sample.speaker, sample.motion.fps);
        curves.push_back(lip_distance(dataset.templ, predicted, upper_lip, lower_lip));
      }
    }
  }

  std::string csv = "frame,ground_truth";
  for (const auto& v : ablation_variants()) csv += "," + v;
  csv += "\n";
  char cell[64];
  for (std::size_t t = 0; t < curves.front().size(); ++t) {
    csv += std::to_string(t);
    for (const auto& curve : curves) {
      std::snprintf(cell, sizeof cell, ",%.9g", curve[t]);
      csv += cell;
    }
    csv += "\n";
  }
  result.lip_distance_csv = std::move(csv);
  return result;
}

std::string AblationResult::table() const {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof line, "%-24s %6s %14s %14s\n", "variant", "seed", "val_lve", "val_fdd");
  out += line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-24s %6llu %14.6e %14.6e\n", r.variant.c_str(),
                  static_cast<unsigned long long>(r.seed), r.lve, r.fdd);
    out += line;
  }
  return out;
}

std::string AblationResult::csv() const {
  std::string out = "variant,seed,val_lve,val_fdd\n";
  char line[160];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%s,%llu,%.9g,%.9g\n", r.variant.c_str(), static_cast<unsigned long long>(r.seed),
                  r.lve, r.fdd);
    out += line;
  }
  return out;
}

ordered_json AblationResult::to_json() const {
  ordered_json rows_json = ordered_json::array();
  for (const auto& r : rows)
    rows_json.push_back({{"variant", r.variant}, {"seed", r.seed}, {"val_lve", r.lve}, {"val_fdd", r.fdd},
                         {"checkpoint", r.checkpoint}});
  return {{"rows", std::move(rows_json)},
          {"disable_dual_worse_seeds", dual_helps_count()},
          {"seeds", seed_count()}};
}

std::size_t AblationResult::seed_count() const {
  std::vector<std::uint64_t> seen;
  for (const auto& r : rows)
    if (std::find(seen.begin(), seen.end(), r.seed) == seen.end()) seen.push_back(r.seed);
  return seen.size();
}

std::size_t AblationResult::dual_helps_count() const {
  std::size_t count = 0;
  for (const auto& full : rows) {
    if (full.variant != "full") continue;
    for (const auto& other : rows)
      if (other.variant == "disable_dual" && other.seed == full.seed && other.lve > full.lve) ++count;
  }
  return count;
}

}  // namespace dualtalker

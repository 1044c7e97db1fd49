// SPDX-License-Identifier: Apache-2.0
// dualtalker: synth, train, eval, animate, lipread, gradcheck, ablate.
#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "dualtalker/config.hpp"
#include "dualtalker/data.hpp"
#include "dualtalker/errors.hpp"
#include "dualtalker/metrics.hpp"
#include "dualtalker/model.hpp"
#include "dualtalker/suite.hpp"
#include "dualtalker/train.hpp"

namespace fs = std::filesystem;
using namespace dualtalker;
using ordered_json = nlohmann::ordered_json;

namespace {

enum Exit { ok = 0, config_error = 2, io_error = 3, numeric_error = 4, verification_failed = 5 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool out_required) {
  cmd->add_option("--config", c.config, "JSON configuration file");
  cmd->add_option("--seed", c.seed, "Seed override");
  auto* out = cmd->add_option("--out", c.out, "Output directory");
  if (out_required) out->required();
}

CliConfig resolve(const Common& c) {
  CliConfig cfg = c.config.empty() ? CliConfig{} : load_config(c.config);
  if (c.seed) {
    cfg.train.seed = *c.seed;
    cfg.synthetic.seed = *c.seed;
  }
  if (!c.out.empty()) cfg.paths.out = c.out;
  return cfg;
}

void print_resolved(const char* command, const CliConfig& cfg) {
  std::cout << "dualtalker " << kToolVersion << " " << command << "\n"
            << "resolved config (sha256 " << config_hash(cfg) << "):\n"
            << to_json(cfg).dump(2) << "\n";
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  std::FILE* f = std::fopen(path.string().c_str(), "wb");
  if (!f) throw IoError("cannot write '" + path.string() + "'");
  const bool good = std::fwrite(text.data(), 1, text.size(), f) == text.size();
  if (std::fclose(f) != 0 || !good) throw IoError("cannot write '" + path.string() + "'");
}

Dataset open_dataset(CliConfig& cfg) {
  if (cfg.paths.data.empty()) throw ConfigError("no dataset given (--data or paths.data)");
  Dataset ds = load_dataset(cfg.paths.data);
  resolve_against(cfg, ds);
  return ds;
}

int run_synth(const Common& c, const std::string& spec_file) {
  CliConfig cfg = c.config.empty() ? CliConfig{} : load_config(c.config);
  if (!spec_file.empty()) {
    const fs::path p = spec_file;
    cfg.synthetic = synthetic_spec_from_json(ordered_json::parse(std::ifstream(p)), cfg.synthetic);
  }
  if (c.seed) cfg.synthetic.seed = *c.seed;
  cfg.paths.out = c.out;
  cfg.synthetic.validate();
  print_resolved("synth", cfg);
  const DatasetManifest m = generate_synthetic(cfg.synthetic, c.out);
  std::size_t counts[3] = {0, 0, 0};
  for (const auto& e : m.entries) ++counts[e.split == "train" ? 0 : e.split == "val" ? 1 : 2];
  const fs::path manifest = fs::path(c.out) / "manifest.json";
  write_run_manifest(c.out, "synth", cfg, cfg.synthetic.seed);
  std::cout << "manifest: " << manifest.string() << "\n"
            << "sequences: " << m.entries.size() << " (train " << counts[0] << ", val " << counts[1] << ", test "
            << counts[2] << ")\n"
            << "frames per sequence: " << cfg.synthetic.frames << "\n"
            << "speakers: " << m.speakers << "\n"
            << "manifest sha256: " << sha256_file(manifest) << "\n";
  return ok;
}

int run_train(Common c, const std::string& data, std::optional<std::size_t> max_steps,
              std::optional<std::size_t> epochs, std::optional<double> lr) {
  CliConfig cfg = resolve(c);
  if (!data.empty()) cfg.paths.data = data;
  if (max_steps) cfg.train.max_steps = *max_steps;
  if (epochs) cfg.train.epochs = *epochs;
  if (lr) cfg.train.learning_rate = *lr;
  Dataset ds = open_dataset(cfg);
  cfg.train.validate();
  cfg.model.validate();
  print_resolved("train", cfg);

  Model model(cfg.model, cfg.train.seed);
  const auto started = std::chrono::steady_clock::now();
  const TrainResult result = train(model, ds, cfg.train, cfg.paths.out, [](const StepRecord& r) {
    if (r.step % 100 == 0)
      std::printf("step %6zu  total %.6e  l_primal %.6e  l_dual %.6e  l_dr %.6e  l_ccrl %.6e\n", r.step,
                  r.loss.total, r.loss.l_primal, r.loss.l_dual, r.loss.l_dr, r.loss.l_ccrl);
  });
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  write_text(fs::path(cfg.paths.out) / "config.json", to_json(cfg).dump(2) + "\n");
  write_run_manifest(cfg.paths.out, "train", cfg, cfg.train.seed,
                     {{"steps", result.steps}, {"best_val_lve", result.best_val_lve}, {"seconds", seconds}});
  std::printf("steps: %zu  best val LVE: %.6e  (%.1f s)\n", result.steps, result.best_val_lve, seconds);
  std::cout << "best checkpoint: " << result.best_checkpoint.string() << "\n";
  return ok;
}

int run_eval(Common c, const std::string& checkpoint, const std::string& data, const std::string& split,
             bool predict_gt) {
  CliConfig cfg = resolve(c);
  if (!data.empty()) cfg.paths.data = data;
  cfg.paths.checkpoint = checkpoint;
  Dataset ds = open_dataset(cfg);
  CheckpointHeader header;
  Model model = load_checkpoint(checkpoint, &header);
  cfg.model = header.model;
  check_compatible(model.config(), ds);
  print_resolved("eval", cfg);
  const MetricReport report = evaluate(model, ds, split, predict_gt);
  std::cout << report.to_table();
  if (!cfg.paths.out.empty()) {
    const fs::path out = cfg.paths.out;
    ordered_json j = report.to_json();
    j["split"] = split;
    j["checkpoint"] = checkpoint;
    j["oracle"] = predict_gt;
    write_text(out / "report.json", j.dump(2) + "\n");
    write_text(out / "report.txt", report.to_table());
    write_run_manifest(out, "eval", cfg, cfg.train.seed);
  }
  return ok;
}

int run_animate(Common c, const std::string& checkpoint, const std::string& features_file, int speaker,
                std::size_t obj_every, std::optional<std::size_t> frames, double fps, const std::string& templ_file) {
  CliConfig cfg = resolve(c);
  cfg.paths.checkpoint = checkpoint;
  CheckpointHeader header;
  Model model = load_checkpoint(checkpoint, &header);
  cfg.model = header.model;
  print_resolved("animate", cfg);
  FeatureSequence features = load_features(features_file);
  if (frames) features = resample_features(features, *frames);
  const MotionSequence motion = model.generate_motion(features, speaker, fps);
  const fs::path out = cfg.paths.out;
  save_motion(out / "motion.dtmo", motion);
  std::size_t written = 0;
  if (obj_every > 0) {
    if (templ_file.empty()) throw ConfigError("--obj-every needs --template");
    const NeutralTemplate templ = load_template(templ_file);
    for (std::size_t t = 0; t < motion.frames(); t += obj_every) {
      char name[32];
      std::snprintf(name, sizeof name, "frame_%05zu.obj", t);
      export_obj(templ, motion, t, out / "obj" / name);
      ++written;
    }
  }
  write_run_manifest(out, "animate", cfg, cfg.train.seed, {{"frames", motion.frames()}, {"obj_frames", written}});
  std::cout << "motion: " << (out / "motion.dtmo").string() << " (" << motion.frames() << " frames, "
            << motion.vertices() << " vertices)\n";
  if (obj_every > 0) std::cout << "obj frames: " << written << "\n";
  return ok;
}

int run_lipread(Common c, const std::string& checkpoint, const std::string& motion_file, int speaker,
                const std::string& out_file) {
  CliConfig cfg = resolve(c);
  cfg.paths.checkpoint = checkpoint;
  cfg.paths.out = out_file;
  CheckpointHeader header;
  Model model = load_checkpoint(checkpoint, &header);
  cfg.model = header.model;
  print_resolved("lipread", cfg);
  const FeatureSequence features = model.generate_audio(load_motion(motion_file), speaker);
  if (!features.values.all_finite()) throw NumericError("lip reading produced non-finite features");
  save_features(out_file, features);
  std::cout << "features: " << out_file << " (" << features.frames() << " x " << features.dim() << ")\n";
  return ok;
}

int run_gradcheck(const Common& c, const std::string& scope, double tolerance) {
  CliConfig cfg = resolve(c);
  print_resolved("gradcheck", cfg);
  const auto started = std::chrono::steady_clock::now();
  const GradSuiteResult result = run_gradient_suite(parse_scope(scope), tolerance, c.seed.value_or(7));
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  std::cout << result.summary();
  std::printf("scope %s: %zu checks, %zu entries, %zu excluded at kinks, max relative error %.3e, tolerance %.1e, %.1f s\n",
              scope.c_str(), result.reports.size(), result.checked(), result.excluded(), result.max_relative_error(),
              tolerance, seconds);
  std::cout << (result.passed() ? "PASS\n" : "FAIL\n");
  return result.passed() ? ok : verification_failed;
}

int run_ablate(Common c, const std::string& data, std::size_t seeds, std::optional<std::size_t> max_steps,
               std::optional<std::size_t> epochs) {
  CliConfig cfg = resolve(c);
  if (!data.empty()) cfg.paths.data = data;
  if (max_steps) cfg.train.max_steps = *max_steps;
  if (epochs) cfg.train.epochs = *epochs;
  if (seeds == 0) throw ConfigError("--seeds must be >= 1");
  Dataset ds = open_dataset(cfg);
  cfg.train.validate();
  print_resolved("ablate", cfg);
  std::vector<std::uint64_t> seed_list;
  for (std::size_t i = 0; i < seeds; ++i) seed_list.push_back(cfg.train.seed + i);
  const AblationResult result = ablate(ds, cfg.model, cfg.train, seed_list, cfg.paths.out);
  const fs::path out = cfg.paths.out;
  write_text(out / "ablation.txt", result.table());
  write_text(out / "ablation.csv", result.csv());
  write_text(out / "ablation.json", result.to_json().dump(2) + "\n");
  write_text(out / "lip_distance.csv", result.lip_distance_csv);
  write_run_manifest(out, "ablate", cfg, cfg.train.seed);
  std::cout << result.table();
  std::printf("disable_dual worse than full on %zu of %zu seeds\n", result.dual_helps_count(), result.seed_count());
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Speech-driven facial motion and lip reading trained jointly"};
  app.set_version_flag("--version", std::string("dualtalker ") + kToolVersion);
  app.require_subcommand(1);

  Common synth_c, train_c, eval_c, anim_c, lip_c, grad_c, abl_c;
  std::string spec_file, data, checkpoint, split = "test", features_file, motion_file, templ_file, scope = "full";
  std::optional<std::size_t> max_steps, epochs, frames;
  std::optional<double> lr;
  bool predict_gt = false;
  int speaker = 0;
  std::size_t obj_every = 0, seeds = 3;
  double fps = 25.0, tolerance = 1e-4;

  auto* synth = app.add_subcommand("synth", "Generate the synthetic paired corpus");
  add_common(synth, synth_c, true);
  synth->add_option("--spec", spec_file, "Synthetic spec JSON");

  auto* trn = app.add_subcommand("train", "Joint dual training");
  add_common(trn, train_c, true);
  trn->add_option("--data", data, "Dataset manifest");
  trn->add_option("--max-steps", max_steps, "Step cap");
  trn->add_option("--epochs", epochs, "Epoch count");
  trn->add_option("--lr", lr, "Learning rate");

  auto* ev = app.add_subcommand("eval", "LVE and FDD of a checkpoint on one split");
  add_common(ev, eval_c, false);
  ev->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  ev->add_option("--data", data, "Dataset manifest");
  ev->add_option("--split", split, "train | val | test")->check(CLI::IsMember({"train", "val", "test"}));
  ev->add_flag("--predict-gt", predict_gt, "Use the ground truth as the prediction");

  auto* anim = app.add_subcommand("animate", "Predict facial motion from a feature file");
  add_common(anim, anim_c, true);
  anim->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  anim->add_option("--features", features_file, "Feature file")->required();
  anim->add_option("--speaker", speaker, "Speaker id")->required();
  anim->add_option("--obj-every", obj_every, "Write an OBJ every N frames");
  anim->add_option("--template", templ_file, "Template file for OBJ export");
  anim->add_option("--frames", frames, "Resample features to this many frames first");
  anim->add_option("--fps", fps, "Motion frame rate");

  auto* lip = app.add_subcommand("lipread", "Predict audio features from a motion file");
  add_common(lip, lip_c, false);
  std::string lip_out;
  lip->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  lip->add_option("--motion", motion_file, "Motion file")->required();
  lip->add_option("--speaker", speaker, "Speaker id")->required();
  lip->remove_option(lip->get_option("--out"));
  lip->add_option("--out", lip_out, "Output feature file")->required();

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  add_common(grad, grad_c, false);
  grad->add_option("--scope", scope, "op | block | full")->check(CLI::IsMember({"op", "block", "full"}));
  grad->add_option("--tolerance", tolerance, "Relative error tolerance");

  auto* abl = app.add_subcommand("ablate", "Train every ablation variant over several seeds");
  add_common(abl, abl_c, true);
  abl->add_option("--data", data, "Dataset manifest");
  abl->add_option("--seeds", seeds, "Number of seeds, counting up from the base seed");
  abl->add_option("--max-steps", max_steps, "Step cap per run");
  abl->add_option("--epochs", epochs, "Epoch count per run");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : config_error;
  }

  try {
    if (*synth) return run_synth(synth_c, spec_file);
    if (*trn) return run_train(train_c, data, max_steps, epochs, lr);
    if (*ev) return run_eval(eval_c, checkpoint, data, split, predict_gt);
    if (*anim) return run_animate(anim_c, checkpoint, features_file, speaker, obj_every, frames, fps, templ_file);
    if (*lip) return run_lipread(lip_c, checkpoint, motion_file, speaker, lip_out);
    if (*grad) return run_gradcheck(grad_c, scope, tolerance);
    if (*abl) return run_ablate(abl_c, data, seeds, max_steps, epochs);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return numeric_error;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return io_error;
  } catch (const FormatError& e) {
    std::cerr << "file format error: " << e.what() << "\n";
    return io_error;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return config_error;
  } catch (const Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return config_error;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return io_error;
  }
  return config_error;
}

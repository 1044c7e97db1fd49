// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "dualtalker/config.hpp"
#include "dualtalker/errors.hpp"
#include "dualtalker/train.hpp"
#include "oracles.hpp"

using namespace dualtalker;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::path(TEST_SCRATCH) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

const Dataset& tiny_dataset() {
  static const Dataset ds = [] {
    SyntheticSpec s;
    s.n_speakers = 2;
    s.n_sequences = 10;
    s.frames = 8;
    s.vertices = 8;
    s.bands = 6;
    s.latent_dim = 2;
    s.window = 3;
    s.seed = 3;
    const fs::path dir = scratch("tiny_data");
    generate_synthetic(s, dir);
    return load_dataset(dir / "manifest.json");
  }();
  return ds;
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.d = 8;
  c.audio_dim = 6;
  c.heads = 2;
  c.self_heads = 2;
  c.squeeze_ratio = 4;
  c.ff_dim = 16;
  c.vertices = 8;
  c.speakers = 2;
  c.max_frames = 16;
  return c;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.learning_rate = 3e-3;
  t.epochs = 3;
  t.seed = 4;
  return t;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("Adam: one step from p = 0 with g = 1") {
  Parameter p("p", Tensor::matrix({{0.0}}));
  Adam adam({&p}, 1e-4);
  p.grad()[0] = 1.0;
  adam.step();
  const double expect = -1e-4 * ((1 - 0.9) / (1 - 0.9)) / (std::sqrt((1 - 0.999) / (1 - 0.999)) + 1e-8);
  CHECK(p.value()[0] == doctest::Approx(expect).epsilon(1e-15));
  CHECK(p.value()[0] == doctest::Approx(-1e-4).epsilon(1e-6));
  CHECK(p.grad()[0] == 0.0);
  CHECK(adam.steps() == 1);
}

TEST_CASE("Adam: zero gradient leaves parameters and decays moments") {
  Parameter p("p", Tensor::matrix({{0.5, -0.5}}));
  Adam adam({&p}, 1e-2);
  p.grad()[0] = 2.0;
  adam.step();
  const Tensor after_one = p.value();
  const double m1 = adam.first_moment(0)[0], v1 = adam.second_moment(0)[0];
  adam.step();
  // The remaining first moment still moves p; with m and v both decaying the
  // update continues in the same direction but the moments shrink.
  CHECK(adam.first_moment(0)[0] == doctest::Approx(0.9 * m1));
  CHECK(adam.second_moment(0)[0] == doctest::Approx(0.999 * v1));
  CHECK(p.value()[1] == after_one[1]);

  Parameter q("q", Tensor::matrix({{1.0}}));
  Adam fresh({&q}, 1e-2);
  for (int i = 0; i < 5; ++i) fresh.step();
  CHECK(q.value()[0] == 1.0);
  CHECK(fresh.first_moment(0)[0] == 0.0);
}

TEST_CASE("Adam: constant gradient gives updates of size lr") {
  Parameter p("p", Tensor::matrix({{0.0, 0.0}}));
  Adam adam({&p}, 1e-3);
  double last = 0.0;
  for (int i = 0; i < 2000; ++i) {
    p.grad()[0] = 0.3;
    p.grad()[1] = -7.0;
    last = p.value()[0];
    adam.step();
  }
  CHECK(std::abs(p.value()[0] - last) == doctest::Approx(1e-3).epsilon(1e-4));
  CHECK(p.value()[1] > 0.0);
}

TEST_CASE("gradient clipping") {
  Parameter a("a", Tensor::matrix({{0.0, 0.0}}));
  a.grad()[0] = 3.0;
  a.grad()[1] = 4.0;
  CHECK(clip_gradients({&a}, 10.0) == 5.0);
  CHECK(a.grad()[0] == 3.0);
  CHECK(clip_gradients({&a}, 1.0) == 5.0);
  CHECK(a.grad()[0] == doctest::Approx(0.6));
  CHECK(a.grad()[1] == doctest::Approx(0.8));
}

TEST_CASE("train config validation and ablation weights") {
  TrainConfig t;
  CHECK_NOTHROW(t.validate());
  t.learning_rate = 0.0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = TrainConfig{};
  t.epochs = 0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = TrainConfig{};
  t.ablation.disable_dual = true;
  const LossWeights w = t.effective_weights();
  CHECK(w.primal == 1.0);
  CHECK(w.dual == 0.0);
  CHECK(w.duality == 0.0);
  CHECK(w.consistency == 0.0);
  t = TrainConfig{};
  t.ablation.disable_ccrl = true;
  CHECK(t.effective_weights().consistency == 0.0);
  CHECK(t.effective_weights().dual == 1e-8);
}

TEST_CASE("train step: disable_dual gives total == l_primal") {
  const Dataset& ds = tiny_dataset();
  Model m(tiny_model(), 1);
  TrainConfig t = tiny_train();
  t.ablation.disable_dual = true;
  Adam adam(m.parameters(), t.learning_rate);
  for (int i = 0; i < 3; ++i) {
    const LossBundle b = train_step(m, *ds.split("train")[0], t, adam, i);
    CHECK(b.total == b.l_primal);
    CHECK(b.l_dual == 0.0);
  }
  for (const Parameter* p : m.parameters()) CHECK(p->grad() == Tensor(p->value().shape()));
}

TEST_CASE("train step: every shared parameter has one moment pair and moves") {
  const Dataset& ds = tiny_dataset();
  Model m(tiny_model(), 2);
  const TrainConfig t = tiny_train();
  std::vector<Tensor> before;
  for (const Parameter* p : m.parameters()) before.push_back(p->value());
  Adam adam(m.parameters(), t.learning_rate);
  for (int i = 0; i < 3; ++i) train_step(m, *ds.split("train")[i], t, adam, i);
  CHECK(adam.moment_count() == m.parameters().size());
  for (const char* name : {"fusion.audio_qk", "fusion.motion_qk", "audio_encoder.weight", "style_table"}) {
    std::size_t idx = 0;
    while (m.parameters()[idx]->name() != name) ++idx;
    CHECK_FALSE(m.parameters()[idx]->value() == before[idx]);
    CHECK(adam.second_moment(idx).shape() == m.parameters()[idx]->value().shape());
  }
}

TEST_CASE("train step: non-finite losses abort") {
  const Dataset& ds = tiny_dataset();
  Model m(tiny_model(), 3);
  Sequence bad = *ds.split("train")[0];
  for (double& v : bad.motion.displacements.values()) v = 1e200;
  Adam adam(m.parameters(), 1e-3);
  CHECK_THROWS_AS(train_step(m, bad, tiny_train(), adam, 0), NumericError);
}

TEST_CASE("training writes a log and the best checkpoint, deterministically") {
  const Dataset& ds = tiny_dataset();
  const fs::path a = scratch("run_a"), b = scratch("run_b");
  Model ma(tiny_model(), 5), mb(tiny_model(), 5);
  TrainConfig t = tiny_train();
  t.seed = 5;
  std::size_t callbacks = 0;
  const TrainResult ra = train(ma, ds, t, a, [&](const StepRecord&) { ++callbacks; });
  const TrainResult rb = train(mb, ds, t, b);
  CHECK(ra.steps == 3 * ds.split("train").size());
  CHECK(callbacks == ra.steps);
  CHECK(ra.epoch_val_lve.size() == 3);
  CHECK(slurp(a / "train_log.jsonl") == slurp(b / "train_log.jsonl"));
  CHECK(sha256_file(a / "best.dtck") == sha256_file(b / "best.dtck"));

  std::ifstream log(a / "train_log.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::ordered_json::parse(line);
    std::vector<std::string> keys;
    for (const auto& [k, v] : j.items()) keys.push_back(k);
    CHECK(keys == std::vector<std::string>{"step", "l_primal", "l_dual", "l_dr", "l_ccrl", "total"});
    CHECK(j["step"] == lines);
    ++lines;
  }
  CHECK(lines == ra.steps);

  // The best-validation parameters are loaded and match the checkpoint.
  CHECK(ra.best_val_lve == *std::min_element(ra.epoch_val_lve.begin(), ra.epoch_val_lve.end()));
  const MetricReport live = evaluate(ma, ds, "val");
  const MetricReport saved = evaluate(ra.best_checkpoint, ds, "val");
  CHECK(live.lve == doctest::Approx(ra.best_val_lve).epsilon(1e-12));
  CHECK(oracle::rel(saved.lve, live.lve) < 1e-12);
  CHECK(std::abs(saved.fdd - live.fdd) <= 1e-12 * std::max(1.0, std::abs(live.fdd)));

  CheckpointHeader h;
  load_checkpoint(ra.best_checkpoint, &h);
  CHECK(h.metadata["loss_weights"] == nlohmann::ordered_json::array({1.0, 1e-8, 1e-9, 1e-6}));
}

TEST_CASE("max_steps caps training") {
  const Dataset& ds = tiny_dataset();
  Model m(tiny_model(), 6);
  TrainConfig t = tiny_train();
  t.max_steps = 5;
  const TrainResult r = train(m, ds, t, scratch("capped"));
  CHECK(r.steps == 5);
  CHECK(r.log.size() == 5);
}

TEST_CASE("evaluation") {
  const Dataset& ds = tiny_dataset();
  const Model m(tiny_model(), 7);
  const MetricReport oracle_report = evaluate(m, ds, "test", true);
  CHECK(oracle_report.lve == 0.0);
  CHECK(oracle_report.fdd == 0.0);
  const MetricReport r = evaluate(m, ds, "test");
  CHECK(r.per_sequence.size() == ds.split("test").size());
  double mean = 0.0;
  for (const auto& s : r.per_sequence) mean += s.lve / double(r.per_sequence.size());
  CHECK(r.lve == doctest::Approx(mean).epsilon(1e-14));
  CHECK(r.lve > 0.0);
  CHECK_THROWS_AS(evaluate(m, ds, "dev"), ArgumentError);
}

TEST_CASE("incompatible configurations are rejected") {
  const Dataset& ds = tiny_dataset();
  ModelConfig c = tiny_model();
  c.vertices = 9;
  CHECK_THROWS_AS(check_compatible(c, ds), ConfigError);
  c = tiny_model();
  c.audio_dim = 7;
  CHECK_THROWS_AS(check_compatible(c, ds), ConfigError);
  c = tiny_model();
  c.speakers = 1;
  CHECK_THROWS_AS(check_compatible(c, ds), ConfigError);

  Dataset empty = ds;
  for (auto& s : empty.sequences) s.split = "test";
  Model m(tiny_model(), 8);
  CHECK_THROWS_AS(train(m, empty, tiny_train(), scratch("empty")), ArgumentError);
}

TEST_CASE("ablation harness") {
  const Dataset& ds = tiny_dataset();
  TrainConfig t = tiny_train();
  t.epochs = 1;
  const fs::path out = scratch("ablate");
  const AblationResult r = ablate(ds, tiny_model(), t, {11, 12}, out);
  CHECK(r.rows.size() == 8);
  CHECK(r.seed_count() == 2);
  for (std::size_t i = 0; i < r.rows.size(); ++i) CHECK(r.rows[i].variant == ablation_variants()[i % 4]);
  CHECK(r.dual_helps_count() <= 2);

  // Lip-distance CSV: header plus one line per frame of the sampled sequence.
  std::istringstream csv(r.lip_distance_csv);
  std::string line;
  std::getline(csv, line);
  CHECK(line == "frame,ground_truth,full,disable_dual,disable_ccrl,share_transpose_codec");
  std::size_t n = 0;
  while (std::getline(csv, line)) ++n;
  CHECK(n == 8);
  CHECK(r.csv().find("share_transpose_codec,12,") != std::string::npos);
  CHECK(r.to_json()["rows"].size() == 8);

  // The full variant is bit-identical to a standalone run with the same seed.
  Model solo(tiny_model(), 11);
  TrainConfig ts = t;
  ts.seed = 11;
  train(solo, ds, ts, scratch("solo"));
  CHECK(evaluate(solo, ds, "val").lve == r.rows[0].lve);
  CHECK(slurp(out / "full_seed11" / "train_log.jsonl") == slurp(fs::path(TEST_SCRATCH) / "solo" / "train_log.jsonl"));

  ModelConfig mc = tiny_model();
  TrainConfig tc;
  CHECK_THROWS_AS(apply_variant("bogus", mc, tc), ConfigError);
  apply_variant("share_transpose_codec", mc, tc);
  CHECK(mc.share_transpose_codec);
  CHECK(tc.ablation.share_transpose_codec);
}

// SPDX-License-Identifier: Apache-2.0
// Acceptance run: one PASS/FAIL line per criterion.
#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <algorithm>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "dualtalker/config.hpp"
#include "dualtalker/losses.hpp"
#include "dualtalker/metrics.hpp"
#include "dualtalker/rng.hpp"
#include "dualtalker/suite.hpp"
#include "dualtalker/train.hpp"
#include "oracles.hpp"

using namespace dualtalker;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and budgets.
constexpr double kGradTolerance = 1e-4;
constexpr double kGradBudgetSeconds = 120.0;
constexpr double kOracleTolerance = 1e-12;
constexpr int kOracleInstances = 100;
constexpr double kAutoregressiveTolerance = 1e-9;
constexpr std::size_t kAutoregressiveFrames = 20;
constexpr double kConvergenceRatio = 0.10;  // l_primal must fall by >= 90%
constexpr std::size_t kConvergenceSteps = 2000;
constexpr std::size_t kConvergenceWindow = 32;  // last-epoch mean, in steps
constexpr double kConvergenceBudgetSeconds = 900.0;
constexpr double kAcceptanceLearningRate = 3e-3;
constexpr std::size_t kAcceptanceFF = 128;
constexpr std::size_t kDeterminismSteps = 10;

const fs::path kRoot = TEST_SCRATCH;
int hard_failures = 0;

void report(int id, bool pass, const std::string& what, const std::string& detail, bool soft = false) {
  const char* tag = pass ? "PASS" : (soft ? "SOFT-FAIL" : "FAIL");
  std::printf("[%s] criterion %d: %s -- %s\n", tag, id, what.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass && !soft) ++hard_failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

ModelConfig acceptance_model() {
  ModelConfig c;
  c.d = 32;
  c.heads = 4;
  c.self_heads = 4;
  c.ff_dim = kAcceptanceFF;
  c.audio_dim = 32;
  c.vertices = 120;
  c.speakers = 8;
  c.max_frames = 60;
  return c;
}

TrainConfig acceptance_train(std::uint64_t seed) {
  TrainConfig t;
  t.learning_rate = kAcceptanceLearningRate;
  t.max_steps = kConvergenceSteps;
  t.seed = seed;
  return t;
}

const Dataset& default_dataset() {
  static const Dataset ds = [] {
    const fs::path dir = kRoot / "data";
    generate_synthetic(SyntheticSpec{}, dir);
    return load_dataset(dir / "manifest.json");
  }();
  return ds;
}

void criterion1() {
  const auto t0 = std::chrono::steady_clock::now();
  const GradSuiteResult r = run_gradient_suite(GradScope::full, kGradTolerance);
  const double secs = seconds_since(t0);
  std::size_t losses = 0;
  for (const auto& rep : r.reports) losses += rep.label.rfind("loss", 0) == 0;
  const bool pass = r.passed() && secs < kGradBudgetSeconds && losses >= 5;
  if (!r.passed()) std::printf("%s", r.summary().c_str());
  report(1, pass, "gradient suite, scope full",
         fmt("%zu checks (%zu loss checks), %zu entries, max rel err %.2e < %.0e, %.1f s < %.0f s", r.reports.size(),
             losses, r.checked(), r.max_relative_error(), kGradTolerance, secs, kGradBudgetSeconds));
}

void criterion2() {
  Rng rng(2024);
  ModelConfig c;
  c.d = 8;
  c.audio_dim = 5;
  c.heads = 2;
  c.self_heads = 4;
  c.squeeze_ratio = 4;
  c.ff_dim = 12;
  c.vertices = 6;
  c.speakers = 3;
  c.max_frames = 8;
  double worst[6] = {0, 0, 0, 0, 0, 0};
  const char* names[6] = {"attention", "cross-attention", "modulation", "ccrl", "lve", "fdd"};
  for (int i = 0; i < kOracleInstances; ++i) {
    const Model m(c, rng.next());
    const std::size_t frames = 2 + rng.below(7);
    const Direction dir = i % 2 ? Direction::dual : Direction::primal;
    const Tensor s = rng.normal_tensor({frames, c.d}), o = rng.normal_tensor({frames, c.d});
    Tape tape;
    worst[0] = std::max(worst[0], oracle::max_rel(m.self_attend(tape, tape.constant(s), dir).value(),
                                                  oracle::self_attend(m, s, dir)));
    const bool causal = i % 4 < 2;
    worst[1] = std::max(worst[1], oracle::max_rel(m.cross_attend(tape, tape.constant(s), tape.constant(o), dir, causal).value(),
                                                  oracle::cross_attend(m, s, o, dir, causal)));
    const int spk = static_cast<int>(rng.below(c.speakers));
    Tensor style({1, c.d});
    for (std::size_t k = 0; k < c.d; ++k) style[k] = m.parameter("style_table").value().at(spk, k);
    worst[2] = std::max(worst[2], oracle::max_rel(m.speaker_modulate(tape, tape.constant(s), m.style(tape, spk), dir).value(),
                                                  oracle::modulate(m, s, style, dir)));
    const Tensor motion = rng.normal_tensor({frames, 3 * c.vertices});
    CCRLConfig cc;
    if (i % 3 == 0) cc.bandwidth = 0.5 + rng.uniform();
    if (i % 5 == 0) cc.anchors = AnchorWeighting::kernel;
    const double got = ccrl_direction(tape.constant(s), tape.constant(o), motion, cc).value()[0];
    worst[3] = std::max(worst[3], oracle::rel(got, oracle::ccrl(s, o, motion, cc.bandwidth, cc.anchors == AnchorWeighting::kernel)));

    const MotionSequence a{rng.normal_tensor({frames, c.vertices, 3}), 25.0};
    const MotionSequence b{rng.normal_tensor({frames, c.vertices, 3}), 25.0};
    const std::vector<std::size_t> lips = {0, 1, 2}, upper = {3, 4, 5};
    worst[4] = std::max(worst[4], oracle::rel(lip_vertex_error(a, b, RegionSet::make("l", lips, c.vertices)),
                                              oracle::lve(a.displacements, b.displacements, lips)));
    worst[5] = std::max(worst[5], oracle::rel(fdd(a, b, RegionSet::make("u", upper, c.vertices)),
                                              oracle::fdd(a.displacements, b.displacements, upper)));
  }
  bool pass = true;
  std::string detail = fmt("%d instances each;", kOracleInstances);
  for (int k = 0; k < 6; ++k) {
    pass = pass && worst[k] <= kOracleTolerance;
    detail += fmt(" %s %.1e", names[k], worst[k]);
  }
  report(2, pass, "oracle equivalence", detail + fmt(" (limit %.0e)", kOracleTolerance));
}

void criterion3() {
  const Dataset& ds = default_dataset();
  const auto train_split = ds.split("train");
  bool a_ok = true, b_ok = true, c_ok = true;
  for (bool tied : {false, true}) {
    ModelConfig mc = acceptance_model();
    mc.share_transpose_codec = tied;
    Model m(mc, 31);
    TrainConfig tc = acceptance_train(31);
    tc.ablation.share_transpose_codec = tied;
    Adam adam(m.parameters(), tc.learning_rate);
    for (std::size_t i = 0; i < 10; ++i) train_step(m, *train_split[i], tc, adam, i);
    if (adam.moment_count() != m.parameters().size()) a_ok = b_ok = false;

    Tape tape;
    const Sequence& s = *train_split[0];
    Var x = m.encode_audio(tape, tape.constant(aligned_features(s).values));
    Var y = m.encode_motion(tape, tape.constant(s.motion.flattened()));
    const TaskGraph pg = m.primal(tape, x, y, s.speaker);
    m.dual(tape, y, x, s.speaker);
    std::map<std::string, std::set<const Parameter*>> objects;
    std::map<std::string, int> uses;
    for (std::uint32_t i = 0; i < tape.size(); ++i) {
      const auto& n = tape.node(NodeId{i});
      if (n.source != Tape::NodeSource::parameter) continue;
      objects[n.param->name()].insert(n.param);
      ++uses[n.param->name()];
      if (n.param != &m.parameter(n.param->name())) a_ok = b_ok = false;
    }
    for (const auto& [name, set] : objects)
      if (set.size() != 1) a_ok = b_ok = false;
    a_ok = a_ok && uses["fusion.audio_qk"] == 2 && uses["fusion.motion_qk"] == 2;
    a_ok = a_ok && !m.has_parameter("primal.cross_attn.query") && !m.has_parameter("dual.cross_attn.key");
    b_ok = b_ok && objects["audio_encoder.weight"].size() == 1 && objects["motion_encoder.weight"].size() == 1 &&
           objects["style_table"].size() == 1 && uses["style_table"] == 2;

    if (tied) {
      c_ok = !m.has_parameter("motion_decoder.weight") && !m.has_parameter("audio_decoder.output.weight");
      Tape t2;
      m.decode_motion(t2, t2.constant(pg.fused.value()));
      m.decode_audio(t2, t2.constant(pg.fused.value()));
      int found = 0;
      for (std::uint32_t i = 0; i < t2.size(); ++i) {
        const auto& n = t2.node(NodeId{i});
        if (n.source != Tape::NodeSource::primitive || n.kind != Op::transpose) continue;
        const auto& src = t2.node(n.inputs[0]);
        if (src.source != Tape::NodeSource::parameter) continue;
        const Tensor& w = src.param->value();
        for (std::size_t r = 0; r < w.rows(); ++r)
          for (std::size_t col = 0; col < w.cols(); ++col) c_ok = c_ok && n.value.at(col, r) == w.at(r, col);
        ++found;
      }
      c_ok = c_ok && found == 2;
    }
  }
  report(3, a_ok && b_ok && c_ok, "weight sharing after 10 steps",
         fmt("(a) fusion Q/K single storage %s, (b) encoders/style single objects %s, (c) tied codec exact transpose %s",
             a_ok ? "yes" : "no", b_ok ? "yes" : "no", c_ok ? "yes" : "no"));
}

void criterion4() {
  const Model m(acceptance_model(), 404);
  Rng rng(405);
  const FeatureSequence audio{rng.uniform_tensor({kAutoregressiveFrames, 32}, 0.0, 2.0)};
  const MotionSequence motion{rng.normal_tensor({kAutoregressiveFrames, 120, 3}, 0.5), 25.0};
  const MotionSequence gen = m.generate_motion(audio, 3);
  const Tensor tf = m.forward_primal(audio, 3, gen).prediction;
  double primal = 0.0;
  for (std::size_t i = 0; i < tf.size(); ++i) primal = std::max(primal, std::abs(tf[i] - gen.displacements[i]));
  const FeatureSequence lip = m.generate_audio(motion, 3);
  const Tensor tfd = m.forward_dual(motion, 3, lip).prediction;
  double dual = 0.0;
  for (std::size_t i = 0; i < tfd.size(); ++i) dual = std::max(dual, std::abs(tfd[i] - lip.values[i]));
  report(4, primal <= kAutoregressiveTolerance && dual <= kAutoregressiveTolerance, "autoregressive consistency",
         fmt("T=%zu, max |generate - teacher forced| primal %.1e, dual %.1e (limit %.0e)", kAutoregressiveFrames, primal,
             dual, kAutoregressiveTolerance));
}

void criterion5() {
  const Dataset& ds = default_dataset();
  const auto t0 = std::chrono::steady_clock::now();
  bool pass = true;
  std::string detail;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Model m(acceptance_model(), seed);
    const double untrained = evaluate(m, ds, "val").lve;
    const TrainResult r = train(m, ds, acceptance_train(seed), kRoot / ("converge_seed" + std::to_string(seed)));
    double tail = 0.0;
    for (std::size_t i = r.log.size() - kConvergenceWindow; i < r.log.size(); ++i)
      tail += r.log[i].loss.l_primal / kConvergenceWindow;
    const double ratio = tail / r.log.front().loss.l_primal;
    const double trained = evaluate(m, ds, "val").lve;
    const bool ok = ratio <= kConvergenceRatio && trained < untrained && r.steps == kConvergenceSteps;
    pass = pass && ok;
    detail += fmt(" seed %llu: l_primal %.3f -> %.4f (ratio %.3f), val LVE %.3f -> %.3f;",
                  static_cast<unsigned long long>(seed), r.log.front().loss.l_primal, tail, ratio, untrained, trained);
  }
  const double secs = seconds_since(t0);
  pass = pass && secs < kConvergenceBudgetSeconds;
  report(5, pass, "synthetic convergence",
         fmt("%zu steps, lr %.0e, ff %zu;", kConvergenceSteps, kAcceptanceLearningRate, kAcceptanceFF) + detail +
             fmt(" %.0f s < %.0f s", secs, kConvergenceBudgetSeconds));
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void criterion6() {
  const Dataset& ds = default_dataset();
  const fs::path out = kRoot / "ablate";
  const AblationResult r = ablate(ds, acceptance_model(), acceptance_train(1), {1, 2, 3}, out);
  std::ofstream(out / "ablation.txt") << r.table();
  std::ofstream(out / "lip_distance.csv") << r.lip_distance_csv;
  std::printf("%s", r.table().c_str());
  const bool shape_ok = r.rows.size() == 12 && r.seed_count() == 3;
  // The full rows must reproduce the standalone convergence runs.
  bool reproducible = true;
  for (std::uint64_t seed : {1u, 2u, 3u})
    reproducible = reproducible && slurp(out / ("full_seed" + std::to_string(seed)) / "train_log.jsonl") ==
                                       slurp(kRoot / ("converge_seed" + std::to_string(seed)) / "train_log.jsonl");
  const std::size_t helps = r.dual_helps_count();
  if (!shape_ok || !reproducible)
    report(6, false, "ablation table", fmt("rows %zu, full rows reproducible %s", r.rows.size(), reproducible ? "yes" : "no"));
  else
    report(6, helps * 2 > r.seed_count(), "ablation direction (soft)",
           fmt("disable_dual val LVE above full on %zu of %zu seeds; table in %s", helps, r.seed_count(),
               (out / "ablation.txt").c_str()),
           /*soft=*/true);
}

int run_cli(const std::string& args) {
  const int status = std::system((std::string(DUALTALKER_CLI) + " " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void criterion7() {
  default_dataset();
  const fs::path cfg = kRoot / "determinism.json";
  std::ofstream(cfg) << R"({"model": {"d": 32, "heads": 4, "self_heads": 4, "ff_dim": 128},
                           "train": {"learning_rate": 0.003, "max_steps": 40, "seed": 7}})";
  const std::string base = "train --config " + cfg.string() + " --data " + (kRoot / "data" / "manifest.json").string();
  const int a = run_cli(base + " --out " + (kRoot / "det_a").string());
  const int b = run_cli(base + " --out " + (kRoot / "det_b").string());
  auto head = [](const fs::path& p) {
    std::ifstream in(p);
    std::string line, out;
    for (std::size_t i = 0; i < kDeterminismSteps && std::getline(in, line); ++i) out += line + "\n";
    return out;
  };
  const std::string la = head(kRoot / "det_a" / "train_log.jsonl"), lb = head(kRoot / "det_b" / "train_log.jsonl");
  const bool logs = !la.empty() && la == lb && std::count(la.begin(), la.end(), '\n') == kDeterminismSteps;
  const std::string ha = a == 0 ? sha256_file(kRoot / "det_a" / "best.dtck") : "";
  const std::string hb = b == 0 ? sha256_file(kRoot / "det_b" / "best.dtck") : "";
  report(7, a == 0 && b == 0 && logs && !ha.empty() && ha == hb, "determinism (two CLI train runs)",
         fmt("exit %d/%d, first %zu log lines identical %s, best.dtck sha256 %s %s", a, b, kDeterminismSteps,
             logs ? "yes" : "no", ha.substr(0, 16).c_str(), ha == hb ? "==" : "!="));
}

void criterion8() {
  Rng rng(8);
  const MotionSequence gt{rng.normal_tensor({10, 12, 3}), 25.0};
  const RegionSet lips = RegionSet::make("lips", {0, 1, 2}, 12), upper = RegionSet::make("upper", {6, 7, 8, 9}, 12);
  const double lve0 = lip_vertex_error(gt, gt, lips), fdd0 = fdd(gt, gt, upper);
  MotionSequence off = gt;
  for (std::size_t t = 0; t < 10; ++t)
    for (std::size_t v : lips.indices) {
      off.displacements[(t * 12 + v) * 3 + 0] += 3.0;
      off.displacements[(t * 12 + v) * 3 + 1] += 4.0;
    }
  MotionSequence zero{Tensor({10, 12, 3}), 25.0}, lifted = zero;
  for (std::size_t t = 0; t < 10; ++t) {
    lifted.displacements[(t * 12) * 3 + 0] = 3.0;
    lifted.displacements[(t * 12) * 3 + 1] = 4.0;
  }
  const double lve5 = lip_vertex_error(lifted, zero, lips);
  const double lve_off = lip_vertex_error(off, gt, lips);
  report(8, lve0 == 0.0 && fdd0 == 0.0 && lve5 == 5.0 && std::abs(lve_off - 5.0) < 1e-14, "metric trivia",
         fmt("LVE(gt,gt)=%g, FDD(gt,gt)=%g, (3,4,0) offset LVE=%.17g", lve0, fdd0, lve5));
}

}  // namespace

int main() {
  fs::remove_all(kRoot);
  fs::create_directories(kRoot);
  const auto t0 = std::chrono::steady_clock::now();
  const std::function<void()> criteria[] = {criterion1, criterion2, criterion3, criterion4,
                                            criterion8, criterion7, criterion5, criterion6};
  for (const auto& c : criteria) {
    try {
      c();
    } catch (const std::exception& e) {
      std::printf("[FAIL] criterion raised: %s\n", e.what());
      ++hard_failures;
    }
  }
  std::printf("acceptance: %d hard failure(s), %.0f s total\n", hard_failures, seconds_since(t0));
  return hard_failures == 0 ? 0 : 1;
}

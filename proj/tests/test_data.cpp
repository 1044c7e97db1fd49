// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "binary_io.hpp"
#include "dualtalker/config.hpp"
#include "dualtalker/data.hpp"
#include "dualtalker/errors.hpp"
#include "dualtalker/rng.hpp"
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

AudioClip sine(double freq, std::size_t n, unsigned rate, double amp = 0.5) {
  AudioClip c;
  c.sample_rate = rate;
  for (std::size_t i = 0; i < n; ++i)
    c.samples.push_back(amp * std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(i) / rate));
  return c;
}

/// Values exactly representable in f32 so the f32 payload round trip is bit-exact.
Tensor f32_values(Rng& rng, Shape s) {
  Tensor t = rng.normal_tensor(std::move(s));
  for (double& x : t.values()) x = static_cast<double>(static_cast<float>(x));
  return t;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("silence gives all-zero features") {
  AudioClip c;
  c.samples.assign(16000, 0.0);
  const FeatureSequence f = extract_features(c, 25.0, 10.0, 16);
  for (double v : f.values.values()) CHECK(v == 0.0);
}

TEST_CASE("frame count follows floor((len - frame) / hop) + 1") {
  AudioClip c = sine(440, 1000, 8000);
  // frame = 200 samples, hop = 80
  CHECK(extract_features(c, 25.0, 10.0, 8).frames() == (1000 - 200) / 80 + 1);
  c.samples.resize(200);
  CHECK(extract_features(c, 25.0, 10.0, 8).frames() == 1);
  c.samples.resize(199);
  CHECK_THROWS_AS(extract_features(c, 25.0, 10.0, 8), ArgumentError);
  CHECK_THROWS_AS(extract_features(sine(1, 400, 8000), 25.0, 10.0, 0), ArgumentError);
}

TEST_CASE("a sine at a band centre concentrates energy in that band") {
  const unsigned rate = 16000;
  const std::size_t bands = 8, frame = 400, bins = frame / 2 + 1;
  for (std::size_t target : {1u, 3u, 6u}) {
    // centre bin of the band
    std::size_t lo = bins, hi = 0;
    for (std::size_t k = 0; k < bins; ++k)
      if (k * bands / bins == target) {
        lo = std::min(lo, k);
        hi = std::max(hi, k);
      }
    const double freq = (lo + hi) / 2.0 * rate / static_cast<double>(frame);
    const AudioClip c = sine(freq, 4000, rate);
    const FeatureSequence f = extract_features(c, 25.0, 10.0, bands);
    for (std::size_t t = 0; t < f.frames(); ++t) {
      // Undo log1p to compare energies.
      const double peak = std::expm1(f.values.at(t, target));
      for (std::size_t b = 0; b < bands; ++b)
        if (b != target) CHECK(peak > 10.0 * std::expm1(f.values.at(t, b)));
    }
  }
}

TEST_CASE("band pooling matches a direct DFT") {
  Rng rng(4);
  AudioClip c;
  c.sample_rate = 8000;
  for (int i = 0; i < 360; ++i) c.samples.push_back(rng.uniform(-1.0, 1.0));
  const std::size_t bands = 5;
  const FeatureSequence f = extract_features(c, 20.0, 10.0, bands);  // frame 160, hop 80
  REQUIRE(f.frames() == 3);
  for (std::size_t t = 0; t < 3; ++t) {
    std::vector<double> frame(c.samples.begin() + t * 80, c.samples.begin() + t * 80 + 160);
    const auto mags = oracle::dft_magnitudes(frame);
    std::vector<double> sums(bands, 0.0), counts(bands, 0.0);
    for (std::size_t k = 0; k < mags.size(); ++k) {
      sums[k * bands / mags.size()] += mags[k];
      counts[k * bands / mags.size()] += 1.0;
    }
    for (std::size_t b = 0; b < bands; ++b)
      CHECK(f.values.at(t, b) == doctest::Approx(std::log1p(sums[b] / counts[b])).epsilon(1e-12));
  }
}

TEST_CASE("doubling the amplitude never lowers a feature") {
  Rng rng(8);
  AudioClip c;
  for (int i = 0; i < 3000; ++i) c.samples.push_back(rng.uniform(-0.5, 0.5));
  AudioClip d = c;
  for (double& s : d.samples) s *= 2.0;
  const FeatureSequence a = extract_features(c, 25.0, 10.0, 12);
  const FeatureSequence b = extract_features(d, 25.0, 10.0, 12);
  for (std::size_t i = 0; i < a.values.size(); ++i) CHECK(b.values[i] >= a.values[i]);
}

TEST_CASE("trailing samples shorter than one hop do not change the features") {
  Rng rng(9);
  AudioClip c;
  c.sample_rate = 16000;
  const std::size_t frame = 400, hop = 160;
  for (std::size_t i = 0; i < frame + 7 * hop; ++i) c.samples.push_back(rng.uniform(-1.0, 1.0));
  const FeatureSequence base = extract_features(c, 25.0, 10.0, 16);
  for (std::size_t extra : {1u, 80u, 159u}) {
    AudioClip longer = c;
    for (std::size_t i = 0; i < extra; ++i) longer.samples.push_back(rng.uniform(-1.0, 1.0));
    CHECK(extract_features(longer, 25.0, 10.0, 16).values == base.values);
  }
}

TEST_CASE("resampling examples") {
  FeatureSequence line{Tensor::matrix({{0}, {1}})};
  CHECK(resample_features(line, 3).values == Tensor::matrix({{0}, {0.5}, {1}}));
  FeatureSequence constant{Tensor({5, 3}, 2.5)};
  for (std::size_t n : {2u, 7u, 13u}) {
    const FeatureSequence r = resample_features(constant, n);
    for (double v : r.values.values()) CHECK(v == 2.5);
  }
  CHECK_THROWS_AS(resample_features(FeatureSequence{Tensor({1, 3})}, 4), ArgumentError);
  CHECK_THROWS_AS(resample_features(constant, 1), ArgumentError);

  Rng rng(12);
  const FeatureSequence orig{rng.normal_tensor({7, 4})};
  const FeatureSequence back = resample_features(resample_features(orig, 5), 7);
  CHECK_FALSE(back.values == orig.values);
  for (std::size_t c = 0; c < 4; ++c) {
    CHECK(back.values.at(0, c) == orig.values.at(0, c));
    CHECK(back.values.at(6, c) == orig.values.at(6, c));
  }
}

TEST_CASE("property: resampling is exact on sequences affine in time") {
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.below(20), m = 2 + rng.below(40), dim = 1 + rng.below(4);
    std::vector<double> a(dim), b(dim);
    for (std::size_t c = 0; c < dim; ++c) {
      a[c] = rng.normal();
      b[c] = rng.normal();
    }
    Tensor v({n, dim});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < dim; ++c) v.at(i, c) = a[c] + b[c] * double(i) / double(n - 1);
    const FeatureSequence r = resample_features(FeatureSequence{v}, m);
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t c = 0; c < dim; ++c)
        CHECK(std::abs(r.values.at(j, c) - (a[c] + b[c] * double(j) / double(m - 1))) < 1e-12);
  }
}

TEST_CASE("motion_to_positions") {
  NeutralTemplate templ{Tensor::matrix({{0, 0, 0}, {1, 1, 1}, {2, 2, 2}, {3, 3, 3}}), {}};
  MotionSequence zero{Tensor({2, 4, 3}), 25.0};
  const Tensor p = motion_to_positions(templ, zero);
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t i = 0; i < 12; ++i) CHECK(p[t * 12 + i] == templ.positions[i]);

  MotionSequence one{Tensor({1, 4, 3}), 25.0};
  one.displacements[0] = 1.0;
  const Tensor q = motion_to_positions(templ, one);
  CHECK(q[0] == 1.0);
  for (std::size_t i = 1; i < 12; ++i) CHECK(q[i] == templ.positions[i]);

  Rng rng(14);
  NeutralTemplate rt{rng.normal_tensor({6, 3}), {}};
  MotionSequence rm{rng.normal_tensor({5, 6, 3}), 30.0};
  const Tensor r = motion_to_positions(rt, rm);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t v = 0; v < 6; ++v)
      for (std::size_t c = 0; c < 3; ++c)
        CHECK(r[(t * 6 + v) * 3 + c] == rm.displacements[(t * 6 + v) * 3 + c] + rt.positions.at(v, c));

  MotionSequence wrong{Tensor({1, 5, 3}), 25.0};
  CHECK_THROWS_AS(motion_to_positions(templ, wrong), ShapeError);
}

TEST_CASE("binary round trips are bit-exact") {
  const fs::path dir = scratch("roundtrip");
  Rng rng(15);
  MotionSequence m{f32_values(rng, {9, 7, 3}), 30.0};
  save_motion(dir / "m.dtmo", m);
  const MotionSequence m2 = load_motion(dir / "m.dtmo");
  CHECK(m2.displacements == m.displacements);
  CHECK(m2.fps == 30.0);

  NeutralTemplate t{f32_values(rng, {7, 3}), {}};
  save_template(dir / "t.dtpl", t);
  CHECK(load_template(dir / "t.dtpl").positions == t.positions);

  FeatureSequence f{f32_values(rng, {11, 5})};
  save_features(dir / "f.dtft", f);
  CHECK(load_features(dir / "f.dtft").values == f.values);
}

TEST_CASE("corrupt files raise typed format errors") {
  const fs::path dir = scratch("corrupt");
  Rng rng(16);
  save_motion(dir / "m.dtmo", MotionSequence{f32_values(rng, {3, 4, 3}), 25.0});
  std::string bytes = slurp(dir / "m.dtmo");

  auto kind_of = [&](const std::string& content) {
    io::write_file(dir / "x.dtmo", content);
    try {
      load_motion(dir / "x.dtmo");
    } catch (const FormatError& e) {
      return e.kind();
    }
    FAIL("no FormatError");
    return FormatError::Kind::malformed;
  };
  std::string magic = bytes;
  magic[0] = 'X';
  CHECK(kind_of(magic) == FormatError::Kind::bad_magic);
  std::string version = bytes;
  version[4] = 9;
  CHECK(kind_of(version) == FormatError::Kind::version_mismatch);
  CHECK(kind_of(bytes.substr(0, bytes.size() - 3)) == FormatError::Kind::truncated);
  CHECK(kind_of(bytes.substr(0, 6)) == FormatError::Kind::truncated);
  CHECK_THROWS_AS(load_motion(dir / "missing.dtmo"), IoError);
}

TEST_CASE("OBJ export") {
  const fs::path dir = scratch("obj");
  Rng rng(17);
  NeutralTemplate templ{rng.normal_tensor({5, 3}), {}};
  MotionSequence m{rng.normal_tensor({3, 5, 3}), 25.0};
  for (std::size_t c = 0; c < 15; ++c) m.displacements[15 + c] = 0.0;  // frame 1 is neutral
  export_obj(templ, m, 1, dir / "neutral.obj");
  export_obj(templ, m, 2, dir / "moved.obj");
  CHECK_THROWS_AS(export_obj(templ, m, 3, dir / "bad.obj"), ArgumentError);

  auto parse = [](const fs::path& p) {
    std::ifstream in(p);
    std::vector<double> values;
    std::string tag;
    std::size_t lines = 0;
    double x, y, z;
    while (in >> tag >> x >> y >> z) {
      CHECK(tag == "v");
      values.insert(values.end(), {x, y, z});
      ++lines;
    }
    CHECK(lines == 5);
    return values;
  };
  const auto neutral = parse(dir / "neutral.obj");
  for (std::size_t i = 0; i < 15; ++i) CHECK(std::abs(neutral[i] - templ.positions[i]) <= 5e-7);
  const auto moved = parse(dir / "moved.obj");
  const Tensor pos = motion_to_positions(templ, m);
  for (std::size_t i = 0; i < 15; ++i) CHECK(std::abs(moved[i] - pos[30 + i]) <= 1e-6);
  const std::string text = slurp(dir / "neutral.obj");
  CHECK(text.find('.') != std::string::npos);
  CHECK(text.substr(text.find('.') + 1, 7).find(' ') == 6);  // six decimals
}

TEST_CASE("manifest parsing") {
  DatasetManifest m;
  m.templ = "t.dtpl";
  m.speakers = 2;
  m.entries = {{0, "a.dtft", "a.dtmo", "train"}, {1, "b.dtft", "b.dtmo", "val"}};
  m.lip_indices = {0, 1};
  m.upper_indices = {3, 4};
  const DatasetManifest back = parse_manifest(manifest_json(m), 6);
  CHECK(manifest_json(back) == manifest_json(m));
  CHECK(back.upper_lip() == std::vector<std::size_t>{0});
  CHECK(back.lower_lip() == std::vector<std::size_t>{1});

  auto j = nlohmann::ordered_json::parse(manifest_json(m));
  auto reject = [&](nlohmann::ordered_json bad) { CHECK_THROWS_AS(parse_manifest(bad.dump(), 6), FormatError); };
  auto bad = j;
  bad["extra"] = 1;
  reject(bad);
  bad = j;
  bad["upper_indices"] = {1, 4};
  reject(bad);  // overlaps the lips
  bad = j;
  bad["entries"][0]["split"] = "dev";
  reject(bad);
  bad = j;
  bad["entries"][0]["speaker"] = 2;
  reject(bad);
  bad = j;
  bad["lip_indices"] = {0, 9};
  reject(bad);
  CHECK_THROWS_AS(parse_manifest("{not json", 6), FormatError);
}

TEST_CASE("synthetic generation") {
  SyntheticSpec spec;
  spec.n_speakers = 3;
  spec.n_sequences = 20;
  spec.frames = 12;
  spec.vertices = 16;
  spec.bands = 6;
  spec.seed = 5;
  const fs::path a = scratch("synth_a"), b = scratch("synth_b"), c = scratch("synth_c");
  const DatasetManifest m = generate_synthetic(spec, a);
  generate_synthetic(spec, b);

  SUBCASE("same spec twice gives byte-identical files") {
    for (const auto& e : fs::directory_iterator(a))
      CHECK(slurp(e.path()) == slurp(b / e.path().filename()));
  }
  SUBCASE("a different seed changes the bytes") {
    SyntheticSpec other = spec;
    other.seed = 6;
    generate_synthetic(other, c);
    CHECK(slurp(a / "seq_000.dtmo") != slurp(c / "seq_000.dtmo"));
  }
  SUBCASE("splits are 8:1:1 by sequence and speakers cycle") {
    std::size_t n[3] = {0, 0, 0};
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
      const auto& e = m.entries[i];
      n[e.split == "train" ? 0 : e.split == "val" ? 1 : 2]++;
      CHECK(e.speaker == int(i % 3));
    }
    CHECK(n[0] == 16);
    CHECK(n[1] == 2);
    CHECK(n[2] == 2);
  }
  SUBCASE("the dataset loads with consistent shapes") {
    const Dataset ds = load_dataset(a / "manifest.json");
    CHECK(ds.sequences.size() == 20);
    CHECK(ds.templ.vertex_count() == 16);
    CHECK(ds.split("val").size() == 2);
    for (const auto& s : ds.sequences) {
      CHECK(s.features.frames() == 12);
      CHECK(s.features.dim() == 6);
      CHECK(s.motion.vertices() == 16);
    }
    CHECK(ds.manifest.lip_indices == std::vector<std::size_t>{0, 1});
    CHECK(ds.manifest.upper_indices.front() == 8);
  }
  SUBCASE("the template lies on the unit sphere") {
    const NeutralTemplate t = load_template(a / "template.dtpl");
    for (std::size_t v = 0; v < 16; ++v) {
      const double r = std::hypot(t.positions.at(v, 0), t.positions.at(v, 1), t.positions.at(v, 2));
      CHECK(r == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("synthetic world rendering") {
  SyntheticSpec spec;
  spec.n_speakers = 2;
  spec.vertices = 16;
  spec.bands = 6;
  spec.noise = 0.0;
  const SyntheticWorld w = SyntheticWorld::build(spec);
  Rng rng(3);
  const Tensor z = rng.normal_tensor({5, spec.latent_dim});

  // Without noise the features are softplus(z U) exactly.
  const FeatureSequence f = w.render_features(z, 1, Tensor());
  CHECK(f.values == w.render_features(z, 1, Tensor()).values);
  const Tensor zu = oracle::mm(z, w.mixing[1]);
  for (std::size_t i = 0; i < zu.size(); ++i)
    CHECK(f.values[i] == doctest::Approx(std::log1p(std::exp(zu[i]))).epsilon(1e-13));

  // Same latent, different speaker, different motion.
  const MotionSequence m0 = w.render_motion(z, 0), m1 = w.render_motion(z, 1);
  CHECK_FALSE(m0.displacements == m1.displacements);
  const Tensor zd = oracle::mm(z, w.basis[0]);
  CHECK(oracle::max_rel(m0.flattened(), zd) < 1e-12);

  // Lip columns carry the amplified basis.
  double lip = 0.0, other = 0.0;
  for (std::size_t r = 0; r < spec.latent_dim; ++r) {
    for (std::size_t c = 0; c < 6; ++c) lip += std::abs(w.basis[0].at(r, c));
    for (std::size_t c = 24; c < 30; ++c) other += std::abs(w.basis[0].at(r, c));
  }
  CHECK(lip > other);
}

TEST_CASE("synthetic spec validation") {
  SyntheticSpec s;
  s.window = 4;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s.window = 5;
  s.n_speakers = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

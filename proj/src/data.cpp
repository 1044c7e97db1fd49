// SPDX-License-Identifier: Apache-2.0
#include "dualtalker/data.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>

#include <json.hpp>

#include "binary_io.hpp"
#include "dualtalker/errors.hpp"
#include "dualtalker/rng.hpp"

namespace dualtalker {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

void NeutralTemplate::validate() const {
  if (positions.rank() != 2 || positions.cols() != 3)
    throw ArgumentError("template positions must be V x 3, got " + shape_string(positions.shape()));
  if (positions.rows() < 4) throw ArgumentError("template needs at least 4 vertices");
  if (!positions.all_finite()) throw ArgumentError("template has non-finite coordinates");
}

Tensor MotionSequence::flattened() const {
  return displacements.reshaped({frames(), vertices() * 3});
}

MotionSequence MotionSequence::from_flat(const Tensor& flat, double fps) {
  if (flat.cols() % 3 != 0) throw ShapeError("flat motion width must be a multiple of 3");
  return MotionSequence{flat.reshaped({flat.rows(), flat.cols() / 3, 3}), fps};
}

FeatureSequence extract_features(const AudioClip& clip, double frame_ms, double hop_ms, std::size_t bands) {
  if (bands == 0) throw ArgumentError("extract_features: bands must be >= 1");
  if (clip.sample_rate == 0) throw ArgumentError("extract_features: sample rate must be positive");
  const auto frame_len = static_cast<std::size_t>(std::lround(frame_ms * clip.sample_rate / 1000.0));
  const auto hop = static_cast<std::size_t>(std::lround(hop_ms * clip.sample_rate / 1000.0));
  if (frame_len < 2 || hop == 0) throw ArgumentError("extract_features: frame and hop must span samples");
  if (clip.samples.size() < frame_len)
    throw ArgumentError("extract_features: clip too short (" + std::to_string(clip.samples.size()) +
                        " samples, one frame needs " + std::to_string(frame_len) + ")");
  const std::size_t bins = frame_len / 2 + 1;
  if (bins < bands) throw ArgumentError("extract_features: more bands than DFT bins");

  const std::size_t frames = (clip.samples.size() - frame_len) / hop + 1;
  const double two_pi = 2.0 * std::numbers::pi;

  std::vector<double> window(frame_len);
  for (std::size_t n = 0; n < frame_len; ++n)
    window[n] = 0.5 - 0.5 * std::cos(two_pi * static_cast<double>(n) / static_cast<double>(frame_len));
  std::vector<double> cos_table(frame_len), sin_table(frame_len);
  for (std::size_t n = 0; n < frame_len; ++n) {
    cos_table[n] = std::cos(two_pi * static_cast<double>(n) / static_cast<double>(frame_len));
    sin_table[n] = std::sin(two_pi * static_cast<double>(n) / static_cast<double>(frame_len));
  }
  std::vector<std::size_t> band_of(bins);
  std::vector<double> band_count(bands, 0.0);
  for (std::size_t k = 0; k < bins; ++k) {
    band_of[k] = k * bands / bins;
    band_count[band_of[k]] += 1.0;
  }

  Tensor out({frames, bands});
  std::vector<double> frame(frame_len);
  for (std::size_t f = 0; f < frames; ++f) {
    const std::size_t start = f * hop;
    for (std::size_t n = 0; n < frame_len; ++n) frame[n] = clip.samples[start + n] * window[n];
    for (std::size_t k = 0; k < bins; ++k) {
      double re = 0.0, im = 0.0;
      std::size_t idx = 0;
      for (std::size_t n = 0; n < frame_len; ++n) {
        re += frame[n] * cos_table[idx];
        im -= frame[n] * sin_table[idx];
        idx += k;
        if (idx >= frame_len) idx -= frame_len;
      }
      out.at(f, band_of[k]) += std::sqrt(re * re + im * im);
    }
    for (std::size_t b = 0; b < bands; ++b) out.at(f, b) = std::log1p(out.at(f, b) / band_count[b]);
  }
  return FeatureSequence{std::move(out)};
}

FeatureSequence resample_features(const FeatureSequence& features, std::size_t target_frames) {
  const std::size_t n = features.frames();
  if (n < 2 || target_frames < 2)
    throw ArgumentError("resample_features: need at least 2 source and 2 target frames");
  const std::size_t dim = features.dim();
  const Tensor& src = features.values;
  Tensor out({target_frames, dim});
  for (std::size_t j = 0; j < target_frames; ++j) {
    if (j == 0 || j + 1 == target_frames) {
      const std::size_t from = j == 0 ? 0 : n - 1;
      for (std::size_t c = 0; c < dim; ++c) out.at(j, c) = src.at(from, c);
      continue;
    }
    const double pos = static_cast<double>(j) * static_cast<double>(n - 1) / static_cast<double>(target_frames - 1);
    auto lo = static_cast<std::size_t>(std::floor(pos));
    if (lo >= n - 1) lo = n - 2;
    const double frac = pos - static_cast<double>(lo);
    for (std::size_t c = 0; c < dim; ++c) {
      const double a = src.at(lo, c), b = src.at(lo + 1, c);
      out.at(j, c) = a + frac * (b - a);
    }
  }
  return FeatureSequence{std::move(out)};
}

Tensor motion_to_positions(const NeutralTemplate& templ, const MotionSequence& motion) {
  const std::size_t v = templ.vertex_count();
  if (motion.vertices() != v)
    throw ShapeError("motion has " + std::to_string(motion.vertices()) + " vertices, template has " +
                     std::to_string(v));
  Tensor out(motion.displacements.shape());
  const std::size_t stride = v * 3;
  for (std::size_t t = 0; t < motion.frames(); ++t)
    for (std::size_t i = 0; i < stride; ++i)
      out[t * stride + i] = templ.positions[i] + motion.displacements[t * stride + i];
  return out;
}

namespace {

void put_f32_payload(io::BinaryWriter& w, const Tensor& t) {
  for (double v : t.values()) w.f32(static_cast<float>(v));
}

Tensor get_f32_payload(io::BinaryReader& r, Shape shape) {
  const std::size_t count = shape_size(shape);
  r.require(count * 4);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = r.f32();
  return t;
}

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > UINT32_MAX) throw ArgumentError(std::string(what) + " exceeds u32 range");
  return static_cast<std::uint32_t>(v);
}

void require_positive(std::uint32_t v, const std::string& source, const char* what) {
  if (v == 0)
    throw FormatError(FormatError::Kind::malformed, source + ": " + what + " must be positive");
}

constexpr std::uint32_t kFormatVersion = 1;

}  // namespace

void save_motion(const fs::path& path, const MotionSequence& motion) {
  io::BinaryWriter w;
  w.magic("DTMO");
  w.u32(kFormatVersion);
  w.u32(checked_u32(motion.frames(), "frame count"));
  w.u32(checked_u32(motion.vertices(), "vertex count"));
  w.f32(static_cast<float>(motion.fps));
  put_f32_payload(w, motion.displacements);
  w.save(path);
}

MotionSequence load_motion(const fs::path& path) {
  auto r = io::BinaryReader::open(path);
  r.expect_magic("DTMO");
  r.expect_version(kFormatVersion);
  const std::uint32_t frames = r.u32();
  const std::uint32_t vertices = r.u32();
  const float fps = r.f32();
  require_positive(frames, path.string(), "frame count");
  require_positive(vertices, path.string(), "vertex count");
  MotionSequence m;
  m.fps = fps;
  m.displacements = get_f32_payload(r, {frames, vertices, 3});
  return m;
}

void save_template(const fs::path& path, const NeutralTemplate& templ) {
  io::BinaryWriter w;
  w.magic("DTPL");
  w.u32(kFormatVersion);
  w.u32(checked_u32(templ.vertex_count(), "vertex count"));
  put_f32_payload(w, templ.positions);
  w.save(path);
}

NeutralTemplate load_template(const fs::path& path) {
  auto r = io::BinaryReader::open(path);
  r.expect_magic("DTPL");
  r.expect_version(kFormatVersion);
  const std::uint32_t vertices = r.u32();
  require_positive(vertices, path.string(), "vertex count");
  NeutralTemplate templ;
  templ.positions = get_f32_payload(r, {vertices, 3});
  return templ;
}

void save_features(const fs::path& path, const FeatureSequence& features) {
  io::BinaryWriter w;
  w.magic("DTFT");
  w.u32(kFormatVersion);
  w.u32(checked_u32(features.frames(), "frame count"));
  w.u32(checked_u32(features.dim(), "feature dim"));
  put_f32_payload(w, features.values);
  w.save(path);
}

FeatureSequence load_features(const fs::path& path) {
  auto r = io::BinaryReader::open(path);
  r.expect_magic("DTFT");
  r.expect_version(kFormatVersion);
  const std::uint32_t frames = r.u32();
  const std::uint32_t dim = r.u32();
  require_positive(frames, path.string(), "frame count");
  require_positive(dim, path.string(), "feature dim");
  return FeatureSequence{get_f32_payload(r, {frames, dim})};
}

void export_obj(const NeutralTemplate& templ, const MotionSequence& motion, std::size_t frame, const fs::path& path) {
  if (frame >= motion.frames())
    throw ArgumentError("export_obj: frame " + std::to_string(frame) + " out of range");
  const Tensor positions = motion_to_positions(templ, motion);
  const std::size_t v = templ.vertex_count();
  std::string text;
  text.reserve(v * 40);
  char line[128];
  for (std::size_t i = 0; i < v; ++i) {
    const double* p = positions.data() + (frame * v + i) * 3;
    std::snprintf(line, sizeof line, "v %.6f %.6f %.6f\n", p[0], p[1], p[2]);
    text += line;
  }
  for (const auto& f : templ.faces) {
    std::snprintf(line, sizeof line, "f %u %u %u\n", f[0] + 1, f[1] + 1, f[2] + 1);
    text += line;
  }
  io::write_file(path, text);
}

std::vector<std::size_t> DatasetManifest::upper_lip() const {
  if (upper_lip_indices) return *upper_lip_indices;
  return {lip_indices.begin(), lip_indices.begin() + static_cast<std::ptrdiff_t>(lip_indices.size() / 2)};
}

std::vector<std::size_t> DatasetManifest::lower_lip() const {
  if (lower_lip_indices) return *lower_lip_indices;
  return {lip_indices.begin() + static_cast<std::ptrdiff_t>(lip_indices.size() / 2), lip_indices.end()};
}

std::string manifest_json(const DatasetManifest& m) {
  ordered_json j;
  j["template"] = m.templ;
  j["speakers"] = m.speakers;
  ordered_json entries = ordered_json::array();
  for (const auto& e : m.entries)
    entries.push_back({{"speaker", e.speaker}, {"features", e.features}, {"motion", e.motion}, {"split", e.split}});
  j["entries"] = std::move(entries);
  j["lip_indices"] = m.lip_indices;
  j["upper_indices"] = m.upper_indices;
  if (m.upper_lip_indices) j["upper_lip_indices"] = *m.upper_lip_indices;
  if (m.lower_lip_indices) j["lower_lip_indices"] = *m.lower_lip_indices;
  return j.dump(2) + "\n";
}

namespace {

std::vector<std::size_t> index_set(const ordered_json& j, const char* key, std::size_t vertex_count) {
  if (!j.is_array()) throw FormatError(FormatError::Kind::malformed, std::string("manifest: '") + key + "' must be an array");
  std::vector<std::size_t> out = j.get<std::vector<std::size_t>>();
  std::set<std::size_t> seen;
  for (std::size_t v : out) {
    if (!seen.insert(v).second)
      throw FormatError(FormatError::Kind::malformed, std::string("manifest: duplicate index in '") + key + "'");
    if (vertex_count && v >= vertex_count)
      throw FormatError(FormatError::Kind::malformed, std::string("manifest: index out of range in '") + key + "'");
  }
  return out;
}

}  // namespace

DatasetManifest parse_manifest(const std::string& json_text, std::size_t vertex_count) {
  ordered_json j;
  try {
    j = ordered_json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::malformed, std::string("manifest: ") + e.what());
  }
  static const std::set<std::string> known = {"template",      "speakers",          "entries",          "lip_indices",
                                              "upper_indices", "upper_lip_indices", "lower_lip_indices"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw FormatError(FormatError::Kind::malformed, "manifest: unknown key '" + key + "'");
  try {
    DatasetManifest m;
    m.templ = j.at("template").get<std::string>();
    m.speakers = j.at("speakers").get<int>();
    if (m.speakers <= 0) throw FormatError(FormatError::Kind::malformed, "manifest: speakers must be positive");
    std::set<int> used;
    for (const auto& e : j.at("entries")) {
      ManifestEntry entry;
      entry.speaker = e.at("speaker").get<int>();
      entry.features = e.at("features").get<std::string>();
      entry.motion = e.at("motion").get<std::string>();
      entry.split = e.at("split").get<std::string>();
      if (entry.speaker < 0 || entry.speaker >= m.speakers)
        throw FormatError(FormatError::Kind::malformed, "manifest: speaker id out of range");
      if (entry.split != "train" && entry.split != "val" && entry.split != "test")
        throw FormatError(FormatError::Kind::malformed, "manifest: unknown split '" + entry.split + "'");
      used.insert(entry.speaker);
      m.entries.push_back(std::move(entry));
    }
    m.lip_indices = index_set(j.at("lip_indices"), "lip_indices", vertex_count);
    m.upper_indices = index_set(j.at("upper_indices"), "upper_indices", vertex_count);
    if (j.contains("upper_lip_indices"))
      m.upper_lip_indices = index_set(j["upper_lip_indices"], "upper_lip_indices", vertex_count);
    if (j.contains("lower_lip_indices"))
      m.lower_lip_indices = index_set(j["lower_lip_indices"], "lower_lip_indices", vertex_count);
    const std::set<std::size_t> lips(m.lip_indices.begin(), m.lip_indices.end());
    for (std::size_t v : m.upper_indices)
      if (lips.count(v)) throw FormatError(FormatError::Kind::malformed, "manifest: lip and upper sets overlap");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::malformed, std::string("manifest: ") + e.what());
  }
}

void save_manifest(const fs::path& path, const DatasetManifest& manifest) {
  io::write_file(path, manifest_json(manifest));
}

DatasetManifest load_manifest(const fs::path& path) { return parse_manifest(io::read_file(path)); }

std::vector<const Sequence*> Dataset::split(const std::string& name) const {
  std::vector<const Sequence*> out;
  for (const auto& s : sequences)
    if (s.split == name) out.push_back(&s);
  return out;
}

Dataset load_dataset(const fs::path& manifest_path) {
  Dataset ds;
  const std::string text = io::read_file(manifest_path);
  ds.manifest = parse_manifest(text);
  const fs::path base = manifest_path.parent_path();
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };
  ds.templ = load_template(resolve(ds.manifest.templ));
  ds.templ.validate();
  ds.manifest = parse_manifest(text, ds.templ.vertex_count());
  for (const auto& e : ds.manifest.entries) {
    Sequence s;
    s.name = fs::path(e.motion).stem().string();
    s.speaker = e.speaker;
    s.split = e.split;
    s.features = load_features(resolve(e.features));
    s.motion = load_motion(resolve(e.motion));
    if (s.motion.vertices() != ds.templ.vertex_count())
      throw ShapeError("motion '" + e.motion + "' vertex count differs from template");
    ds.sequences.push_back(std::move(s));
  }
  return ds;
}

void SyntheticSpec::validate() const {
  if (n_speakers == 0 || n_sequences == 0 || frames == 0 || vertices == 0 || bands == 0 || latent_dim == 0 ||
      window == 0)
    throw ConfigError("synthetic spec: all sizes must be positive");
  if (window % 2 == 0) throw ConfigError("synthetic spec: coarticulation window must be odd");
  if (vertices < 4) throw ConfigError("synthetic spec: need at least 4 vertices");
  if (!(noise >= 0.0) || !(fps > 0.0) || !(displacement_scale > 0.0))
    throw ConfigError("synthetic spec: noise must be >= 0, fps and scale > 0");
}

SyntheticWorld SyntheticWorld::build(const SyntheticSpec& spec) {
  spec.validate();
  SyntheticWorld w;
  w.spec = spec;
  Rng rng(spec.seed);
  const std::size_t p = spec.latent_dim, v = spec.vertices;
  const double inv_sqrt_p = 1.0 / std::sqrt(static_cast<double>(p));

  const std::size_t lip_count = std::max<std::size_t>(2, v / 8);
  for (std::size_t i = 0; i < lip_count; ++i) w.lip_indices.push_back(i);
  for (std::size_t i = v / 2; i < v; ++i) w.upper_indices.push_back(i);

  for (std::size_t n = 0; n < spec.n_speakers; ++n) {
    w.mixing.push_back(rng.normal_tensor({p, spec.bands}, inv_sqrt_p));
    Tensor d = rng.normal_tensor({p, v * 3}, inv_sqrt_p);
    for (std::size_t r = 0; r < p; ++r)
      for (std::size_t lip : w.lip_indices)
        for (std::size_t c = 0; c < 3; ++c) d.at(r, lip * 3 + c) *= 3.0;
    w.basis.push_back(std::move(d));
  }

  w.templ.positions = Tensor({v, 3});
  for (std::size_t i = 0; i < v; ++i) {
    double x = 0, y = 0, z = 0, norm = 0;
    while (norm < 1e-9) {
      x = rng.normal();
      y = rng.normal();
      z = rng.normal();
      norm = std::sqrt(x * x + y * y + z * z);
    }
    w.templ.positions.at(i, 0) = x / norm;
    w.templ.positions.at(i, 1) = y / norm;
    w.templ.positions.at(i, 2) = z / norm;
  }
  return w;
}

namespace {

Tensor plain_matmul(const Tensor& a, const Tensor& b) {
  Tensor c({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double av = a.at(i, k);
      for (std::size_t j = 0; j < b.cols(); ++j) c.at(i, j) += av * b.at(k, j);
    }
  return c;
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace

FeatureSequence SyntheticWorld::render_features(const Tensor& latent, std::size_t speaker, const Tensor& noise) const {
  Tensor f = plain_matmul(latent, mixing.at(speaker));
  for (std::size_t i = 0; i < f.size(); ++i) {
    f[i] = softplus(f[i]);
    if (!noise.empty()) f[i] += spec.noise * noise[i];
  }
  return FeatureSequence{std::move(f)};
}

MotionSequence SyntheticWorld::render_motion(const Tensor& latent, std::size_t speaker) const {
  Tensor flat = plain_matmul(latent, basis.at(speaker));
  for (double& x : flat.values()) x *= spec.displacement_scale;
  return MotionSequence::from_flat(flat, spec.fps);
}

DatasetManifest generate_synthetic(const SyntheticSpec& spec, const fs::path& out_dir) {
  const SyntheticWorld world = SyntheticWorld::build(spec);
  Rng rng(spec.seed ^ 0x9E3779B97F4A7C15ULL);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create '" + out_dir.string() + "': " + ec.message());

  DatasetManifest manifest;
  manifest.templ = "template.dtpl";
  manifest.speakers = static_cast<int>(spec.n_speakers);
  manifest.lip_indices = world.lip_indices;
  manifest.upper_indices = world.upper_indices;
  save_template(out_dir / manifest.templ, world.templ);

  const std::size_t t_len = spec.frames, p = spec.latent_dim, w = spec.window;
  const double gain = std::sqrt(static_cast<double>(w));
  for (std::size_t i = 0; i < spec.n_sequences; ++i) {
    const std::size_t speaker = i % spec.n_speakers;
    const Tensor raw = rng.normal_tensor({t_len + w - 1, p});
    Tensor z({t_len, p});
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t k = 0; k < w; ++k)
        for (std::size_t c = 0; c < p; ++c) z.at(t, c) += raw.at(t + k, c);
    for (double& x : z.values()) x *= gain / static_cast<double>(w);
    const Tensor noise = rng.normal_tensor({t_len, spec.bands});

    char stem[32];
    std::snprintf(stem, sizeof stem, "seq_%03zu", i);
    ManifestEntry e;
    e.speaker = static_cast<int>(speaker);
    e.features = std::string(stem) + ".dtft";
    e.motion = std::string(stem) + ".dtmo";
    const std::size_t bucket = i % 10;
    e.split = bucket < 8 ? "train" : (bucket == 8 ? "val" : "test");
    save_features(out_dir / e.features, world.render_features(z, speaker, noise));
    save_motion(out_dir / e.motion, world.render_motion(z, speaker));
    manifest.entries.push_back(std::move(e));
  }
  save_manifest(out_dir / "manifest.json", manifest);
  return manifest;
}

}  // namespace dualtalker

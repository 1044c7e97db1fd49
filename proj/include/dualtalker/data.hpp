// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dualtalker/tensor.hpp"

namespace dualtalker {

/// Neutral face mesh: V x 3 vertex positions, optional triangle faces.
struct NeutralTemplate {
  Tensor positions;
  std::vector<std::array<std::uint32_t, 3>> faces;

  std::size_t vertex_count() const { return positions.shape()[0]; }
  /// Throws ArgumentError unless V >= 4, shape is V x 3 and values are finite.
  void validate() const;
};

/// Per-frame vertex displacements over a template, T x V x 3.
struct MotionSequence {
  Tensor displacements;
  double fps = 25.0;

  std::size_t frames() const { return displacements.shape()[0]; }
  std::size_t vertices() const { return displacements.shape()[1]; }

  /// T x 3V view used by the encoders and decoders.
  Tensor flattened() const;
  static MotionSequence from_flat(const Tensor& flat, double fps);
};

struct AudioClip {
  std::vector<double> samples;
  unsigned sample_rate = 16000;
};

/// frames x dim.
struct FeatureSequence {
  Tensor values;

  std::size_t frames() const { return values.rows(); }
  std::size_t dim() const { return values.cols(); }
};

/// Hann-windowed DFT magnitudes pooled into `bands` equal-width bands, then log(1 + x).
FeatureSequence extract_features(const AudioClip& clip, double frame_ms, double hop_ms, std::size_t bands);

/// Linear interpolation on a normalized time axis; endpoints are copied exactly.
FeatureSequence resample_features(const FeatureSequence& features, std::size_t target_frames);

/// Absolute positions, T x V x 3.
Tensor motion_to_positions(const NeutralTemplate& templ, const MotionSequence& motion);

// Binary formats. All values little-endian; payloads are f32.
void save_motion(const std::filesystem::path& path, const MotionSequence& motion);
MotionSequence load_motion(const std::filesystem::path& path);
void save_template(const std::filesystem::path& path, const NeutralTemplate& templ);
NeutralTemplate load_template(const std::filesystem::path& path);
void save_features(const std::filesystem::path& path, const FeatureSequence& features);
FeatureSequence load_features(const std::filesystem::path& path);

/// Wavefront OBJ vertex lines for frame `frame`, six decimals.
void export_obj(const NeutralTemplate& templ, const MotionSequence& motion, std::size_t frame,
                const std::filesystem::path& path);

struct ManifestEntry {
  int speaker = 0;
  std::string features;
  std::string motion;
  std::string split;  // "train" | "val" | "test"
};

struct DatasetManifest {
  std::string templ;
  int speakers = 0;
  std::vector<ManifestEntry> entries;
  std::vector<std::size_t> lip_indices;
  std::vector<std::size_t> upper_indices;
  // Used for the lip opening curve; default to the two halves of lip_indices.
  std::optional<std::vector<std::size_t>> upper_lip_indices;
  std::optional<std::vector<std::size_t>> lower_lip_indices;

  std::vector<std::size_t> upper_lip() const;
  std::vector<std::size_t> lower_lip() const;
};

/// JSON text of the manifest (stable key order).
std::string manifest_json(const DatasetManifest& manifest);
DatasetManifest parse_manifest(const std::string& json_text, std::size_t vertex_count_hint = 0);
void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);
DatasetManifest load_manifest(const std::filesystem::path& path);

struct Sequence {
  std::string name;
  int speaker = 0;
  std::string split;
  FeatureSequence features;
  MotionSequence motion;
};

struct Dataset {
  NeutralTemplate templ;
  DatasetManifest manifest;
  std::vector<Sequence> sequences;

  std::vector<const Sequence*> split(const std::string& name) const;
};

/// Loads the template and every entry; relative paths resolve against the manifest directory.
Dataset load_dataset(const std::filesystem::path& manifest_path);

struct SyntheticSpec {
  std::size_t n_speakers = 8;
  std::size_t n_sequences = 40;
  std::size_t frames = 60;         // T
  std::size_t vertices = 120;      // V
  std::size_t bands = 32;          // B
  std::size_t latent_dim = 4;      // P
  std::size_t window = 5;          // coarticulation window w, odd
  double noise = 0.01;             // σ_n
  std::uint64_t seed = 1;
  double fps = 25.0;
  double displacement_scale = 1.0;

  void validate() const;
};

/// Speaker-specific generative maps for the synthetic corpus.
struct SyntheticWorld {
  SyntheticSpec spec;
  std::vector<Tensor> mixing;  // U_n: P x B
  std::vector<Tensor> basis;   // D_n: P x 3V, lip columns amplified
  NeutralTemplate templ;
  std::vector<std::size_t> lip_indices;
  std::vector<std::size_t> upper_indices;

  static SyntheticWorld build(const SyntheticSpec& spec);

  /// softplus(z U_n) + noise; `noise` may be empty when σ_n = 0.
  FeatureSequence render_features(const Tensor& latent, std::size_t speaker, const Tensor& noise) const;
  MotionSequence render_motion(const Tensor& latent, std::size_t speaker) const;
};

/// Writes template, feature/motion files and manifest.json into `out_dir`.
/// Split by sequence index: 8 train, 1 val, 1 test out of every 10.
DatasetManifest generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir);

}  // namespace dualtalker

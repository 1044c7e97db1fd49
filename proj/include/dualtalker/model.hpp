// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "dualtalker/data.hpp"
#include "dualtalker/tape.hpp"

namespace dualtalker {

struct ModelConfig {
  std::size_t d = 128;             // latent width
  std::size_t audio_dim = 64;      // B
  std::size_t heads = 4;           // fusion (cross-attention) heads
  std::size_t self_heads = 4;      // motion-/audio-attentive heads
  std::size_t squeeze_ratio = 16;  // r
  std::size_t ff_dim = 2048;
  std::size_t vertices = 120;      // V
  std::size_t speakers = 8;
  std::size_t max_frames = 600;
  bool share_transpose_codec = false;

  void validate() const;
};

nlohmann::ordered_json to_json(const ModelConfig& config);
/// Unknown keys raise ConfigError; missing keys keep `base` values.
ModelConfig model_config_from_json(const nlohmann::ordered_json& j, ModelConfig base = {});

enum class Direction { primal, dual };

struct ForwardOutputs {
  Tensor prediction;             // motion T x V x 3 (primal) or features T x B (dual)
  FeatureSequence fused;         // Y̆ (primal) or X̆ (dual)
  FeatureSequence audio_latent;  // X
  FeatureSequence motion_latent; // Y
};

/// Node handles for one task direction recorded on a tape.
struct TaskGraph {
  Var prediction;     // T x 3V or T x B
  Var fused;          // T x d
  Var audio_latent;   // X, T x d
  Var motion_latent;  // Y, T x d
};

/// Both task directions; the shared encoders, style table and fusion
/// query/key projections are single Parameter objects used by both.
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const noexcept { return config_; }

  /// Registration order; every shared parameter appears once.
  const std::vector<Parameter*>& parameters() const noexcept { return order_; }
  Parameter& parameter(std::string_view name) const;
  bool has_parameter(std::string_view name) const;
  void zero_grad() const;

  // Blocks, recorded onto a caller-owned tape.
  Var encode_audio(Tape& tape, Var features) const;
  Var encode_motion(Tape& tape, Var flat_motion) const;
  Var style(Tape& tape, int speaker) const;
  /// [start token; latent rows 0..T-2]
  Var shift_right(Tape& tape, Var latent, Direction dir) const;
  Var self_attend(Tape& tape, Var stream, Direction dir) const;
  Var speaker_modulate(Tape& tape, Var stream, Var style_row, Direction dir) const;
  /// Multi-head cross-attention, residual + norm, then feed-forward, residual + norm.
  Var cross_attend(Tape& tape, Var queries, Var keys_values, Direction dir, bool causal = true) const;
  Var decode_motion(Tape& tape, Var fused) const;
  Var decode_audio(Tape& tape, Var fused) const;

  /// Teacher-forced primal pass given the encoded audio X and encoded ground-truth motion Y.
  TaskGraph primal(Tape& tape, Var audio_latent, Var motion_latent, int speaker) const;
  /// Teacher-forced dual pass given Y and the encoded ground-truth audio X.
  TaskGraph dual(Tape& tape, Var motion_latent, Var audio_latent, int speaker) const;

  ForwardOutputs forward_primal(const FeatureSequence& features, int speaker, const MotionSequence& gt_motion) const;
  ForwardOutputs forward_dual(const MotionSequence& motion, int speaker, const FeatureSequence& gt_features) const;

  /// Frame-by-frame autoregressive inference.
  MotionSequence generate_motion(const FeatureSequence& features, int speaker, double fps = 25.0) const;
  FeatureSequence generate_audio(const MotionSequence& motion, int speaker) const;

 private:
  Parameter& add(std::string name, Tensor value);
  Var param(Tape& tape, std::string_view name) const;
  Var affine(Tape& tape, Var x, std::string_view weight, std::string_view bias) const;
  Var norm(Tape& tape, Var x, const std::string& prefix) const;
  Var attention_heads(Var queries, Var keys, Var values, std::size_t heads, bool causal) const;
  void check_speaker(int speaker) const;
  void check_length(std::size_t frames) const;

  ModelConfig config_;
  std::vector<std::unique_ptr<Parameter>> storage_;
  std::vector<Parameter*> order_;
};

std::string_view direction_prefix(Direction dir);

/// Checkpoint file: "DTCK", u32 version, u32 length + JSON header, then per
/// parameter: u32 name length, name bytes, u32 rank, u32 dims, values.
struct CheckpointHeader {
  ModelConfig model;
  nlohmann::ordered_json metadata = nlohmann::ordered_json::object();
  bool single_precision = false;
};

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const nlohmann::ordered_json& metadata = nlohmann::ordered_json::object(),
                     bool single_precision = false);
CheckpointHeader read_checkpoint_header(const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path, CheckpointHeader* header = nullptr);

}  // namespace dualtalker

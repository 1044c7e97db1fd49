// SPDX-License-Identifier: Apache-2.0
#include "dualtalker/model.hpp"

#include <cmath>
#include <set>

#include "dualtalker/errors.hpp"
#include "dualtalker/rng.hpp"

namespace dualtalker {

using ordered_json = nlohmann::ordered_json;

void ModelConfig::validate() const {
  if (!d || !audio_dim || !heads || !self_heads || !squeeze_ratio || !ff_dim || !vertices || !speakers || !max_frames)
    throw ConfigError("model config: all sizes must be positive");
  if (d % heads) throw ConfigError("model config: d must be divisible by heads");
  if (d % self_heads) throw ConfigError("model config: d must be divisible by self_heads");
  if ((2 * d) % squeeze_ratio) throw ConfigError("model config: squeeze_ratio must divide 2d");
  if (vertices < 4) throw ConfigError("model config: vertices must be at least 4");
}

ordered_json to_json(const ModelConfig& c) {
  return ordered_json{{"d", c.d},
                      {"audio_dim", c.audio_dim},
                      {"heads", c.heads},
                      {"self_heads", c.self_heads},
                      {"squeeze_ratio", c.squeeze_ratio},
                      {"ff_dim", c.ff_dim},
                      {"vertices", c.vertices},
                      {"speakers", c.speakers},
                      {"max_frames", c.max_frames},
                      {"share_transpose_codec", c.share_transpose_codec}};
}

ModelConfig model_config_from_json(const ordered_json& j, ModelConfig c) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "d") c.d = value.get<std::size_t>();
      else if (key == "audio_dim") c.audio_dim = value.get<std::size_t>();
      else if (key == "heads") c.heads = value.get<std::size_t>();
      else if (key == "self_heads") c.self_heads = value.get<std::size_t>();
      else if (key == "squeeze_ratio") c.squeeze_ratio = value.get<std::size_t>();
      else if (key == "ff_dim") c.ff_dim = value.get<std::size_t>();
      else if (key == "vertices") c.vertices = value.get<std::size_t>();
      else if (key == "speakers") c.speakers = value.get<std::size_t>();
      else if (key == "max_frames") c.max_frames = value.get<std::size_t>();
      else if (key == "share_transpose_codec") c.share_transpose_codec = value.get<bool>();
      else throw ConfigError("model config: unknown key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("model config: bad value for '" + key + "': " + e.what());
    }
  }
  return c;
}

std::string_view direction_prefix(Direction dir) { return dir == Direction::primal ? "primal." : "dual."; }

namespace {

Tensor xavier(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return rng.uniform_tensor({fan_in, fan_out}, -a, a);
}

std::string key(Direction dir, std::string_view suffix) {
  return std::string(direction_prefix(dir)) + std::string(suffix);
}

}  // namespace

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const std::size_t d = config_.d, b = config_.audio_dim, v3 = config_.vertices * 3;
  const std::size_t squeeze = 2 * d / config_.squeeze_ratio;

  add("audio_encoder.weight", xavier(rng, b, d));
  add("audio_encoder.bias", Tensor({1, d}));
  add("motion_encoder.weight", xavier(rng, v3, d));
  add("motion_encoder.bias", Tensor({1, d}));
  add("style_table", rng.normal_tensor({config_.speakers, d}, 1.0));
  add("positional_table", rng.normal_tensor({config_.max_frames, d}, 0.1));
  // W_{Q_X} = W_{K_X̄}: applied to audio-derived streams in both directions.
  add("fusion.audio_qk", xavier(rng, d, d));
  // W_{Q_Y} = W_{K_Ȳ}: applied to motion-derived streams in both directions.
  add("fusion.motion_qk", xavier(rng, d, d));

  for (Direction dir : {Direction::primal, Direction::dual}) {
    add(key(dir, "start_token"), rng.normal_tensor({1, d}, 0.1));
    add(key(dir, "self_attn.query"), xavier(rng, d, d));
    add(key(dir, "self_attn.key"), xavier(rng, d, d));
    add(key(dir, "self_attn.value"), xavier(rng, d, d));
    add(key(dir, "self_attn.output"), xavier(rng, d, d));
    add(key(dir, "self_attn.norm.gain"), Tensor({1, d}, 1.0));
    add(key(dir, "self_attn.norm.bias"), Tensor({1, d}));
    add(key(dir, "modulate.fc1.weight"), xavier(rng, 2 * d, squeeze));
    add(key(dir, "modulate.fc1.bias"), Tensor({1, squeeze}));
    add(key(dir, "modulate.fc2.weight"), xavier(rng, squeeze, d));
    add(key(dir, "modulate.fc2.bias"), Tensor({1, d}));
    add(key(dir, "cross_attn.value"), xavier(rng, d, d));
    add(key(dir, "cross_attn.output"), xavier(rng, d, d));
    add(key(dir, "cross_attn.norm.gain"), Tensor({1, d}, 1.0));
    add(key(dir, "cross_attn.norm.bias"), Tensor({1, d}));
    add(key(dir, "ff.fc1.weight"), xavier(rng, d, config_.ff_dim));
    add(key(dir, "ff.fc1.bias"), Tensor({1, config_.ff_dim}));
    add(key(dir, "ff.fc2.weight"), xavier(rng, config_.ff_dim, d));
    add(key(dir, "ff.fc2.bias"), Tensor({1, d}));
    add(key(dir, "ff.norm.gain"), Tensor({1, d}, 1.0));
    add(key(dir, "ff.norm.bias"), Tensor({1, d}));
  }

  // With a tied codec the decoder weights are transposes of the encoder weights.
  if (!config_.share_transpose_codec) add("motion_decoder.weight", xavier(rng, d, v3));
  add("motion_decoder.bias", Tensor({1, v3}));
  add("audio_decoder.hidden.weight", xavier(rng, d, d));
  add("audio_decoder.hidden.bias", Tensor({1, d}));
  if (!config_.share_transpose_codec) add("audio_decoder.output.weight", xavier(rng, d, b));
  add("audio_decoder.output.bias", Tensor({1, b}));
}

Parameter& Model::add(std::string name, Tensor value) {
  for (const Parameter* p : order_)
    if (p->name() == name) throw Error("duplicate parameter '" + name + "'");
  storage_.push_back(std::make_unique<Parameter>(std::move(name), std::move(value)));
  order_.push_back(storage_.back().get());
  return *storage_.back();
}

Parameter& Model::parameter(std::string_view name) const {
  for (Parameter* p : order_)
    if (p->name() == name) return *p;
  throw ArgumentError("no parameter named '" + std::string(name) + "'");
}

bool Model::has_parameter(std::string_view name) const {
  for (const Parameter* p : order_)
    if (p->name() == name) return true;
  return false;
}

void Model::zero_grad() const {
  for (const Parameter* p : order_) p->zero_grad();
}

Var Model::param(Tape& tape, std::string_view name) const { return tape.parameter(parameter(name)); }

Var Model::affine(Tape& tape, Var x, std::string_view weight, std::string_view bias) const {
  Var h = matmul(x, param(tape, weight));
  return h + broadcast_row(param(tape, bias), x.rows());
}

Var Model::norm(Tape& tape, Var x, const std::string& prefix) const {
  const std::size_t rows = x.rows();
  Var y = layer_norm_rows(x);
  return y * broadcast_row(param(tape, prefix + ".gain"), rows) + broadcast_row(param(tape, prefix + ".bias"), rows);
}

void Model::check_speaker(int speaker) const {
  if (speaker < 0 || static_cast<std::size_t>(speaker) >= config_.speakers)
    throw ArgumentError("speaker id " + std::to_string(speaker) + " outside [0, " + std::to_string(config_.speakers) +
                        ")");
}

void Model::check_length(std::size_t frames) const {
  if (frames == 0 || frames > config_.max_frames)
    throw ArgumentError("sequence length " + std::to_string(frames) + " outside [1, " +
                        std::to_string(config_.max_frames) + "]");
}

Var Model::encode_audio(Tape& tape, Var features) const {
  if (features.value().rank() != 2 || features.cols() != config_.audio_dim)
    throw ShapeError("encode_audio: expected T x " + std::to_string(config_.audio_dim) + ", got " +
                     shape_string(features.shape()));
  const std::size_t frames = features.rows();
  check_length(frames);
  Var x = affine(tape, features, "audio_encoder.weight", "audio_encoder.bias");
  return x + slice(param(tape, "positional_table"), 0, 0, frames);
}

Var Model::encode_motion(Tape& tape, Var flat_motion) const {
  if (flat_motion.value().rank() != 2 || flat_motion.cols() != config_.vertices * 3)
    throw ShapeError("encode_motion: expected T x " + std::to_string(config_.vertices * 3) + ", got " +
                     shape_string(flat_motion.shape()));
  const std::size_t frames = flat_motion.rows();
  check_length(frames);
  Var y = affine(tape, flat_motion, "motion_encoder.weight", "motion_encoder.bias");
  return y + slice(param(tape, "positional_table"), 0, 0, frames);
}

Var Model::style(Tape& tape, int speaker) const {
  check_speaker(speaker);
  const auto row = static_cast<std::size_t>(speaker);
  return slice(param(tape, "style_table"), 0, row, row + 1);
}

Var Model::shift_right(Tape& tape, Var latent, Direction dir) const {
  Var start = param(tape, key(dir, "start_token"));
  if (latent.rows() == 1) return start;
  return concat_rows({start, slice(latent, 0, 0, latent.rows() - 1)});
}

Var Model::attention_heads(Var queries, Var keys, Var values, std::size_t heads, bool causal) const {
  const std::size_t width = queries.cols();
  const std::size_t dk = width / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<Var> outputs;
  outputs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var q = heads == 1 ? queries : slice(queries, 1, h * dk, (h + 1) * dk);
    Var k = heads == 1 ? keys : slice(keys, 1, h * dk, (h + 1) * dk);
    Var v = heads == 1 ? values : slice(values, 1, h * dk, (h + 1) * dk);
    Var weights = softmax_rows(scale * matmul(q, transpose(k)), causal);
    outputs.push_back(matmul(weights, v));
  }
  return heads == 1 ? outputs.front() : concat_cols(outputs);
}

Var Model::self_attend(Tape& tape, Var stream, Direction dir) const {
  check_length(stream.rows());
  if (stream.cols() != config_.d) throw ShapeError("self_attend: stream width differs from d");
  Var q = matmul(stream, param(tape, key(dir, "self_attn.query")));
  Var k = matmul(stream, param(tape, key(dir, "self_attn.key")));
  Var v = matmul(stream, param(tape, key(dir, "self_attn.value")));
  Var heads = attention_heads(q, k, v, config_.self_heads, /*causal=*/true);
  Var projected = matmul(heads, param(tape, key(dir, "self_attn.output")));
  return norm(tape, stream + projected, key(dir, "self_attn.norm"));
}

Var Model::speaker_modulate(Tape& tape, Var stream, Var style_row, Direction dir) const {
  if (stream.cols() != config_.d || style_row.cols() != config_.d || style_row.rows() != 1)
    throw ShapeError("speaker_modulate: width mismatch " + shape_string(stream.shape()) + " vs " +
                     shape_string(style_row.shape()));
  const std::size_t frames = stream.rows();
  Var joined = concat_cols({broadcast_row(style_row, frames), stream});
  Var hidden = relu(affine(tape, joined, key(dir, "modulate.fc1.weight"), key(dir, "modulate.fc1.bias")));
  Var gate = sigmoid(affine(tape, hidden, key(dir, "modulate.fc2.weight"), key(dir, "modulate.fc2.bias")));
  return gate * stream;
}

Var Model::cross_attend(Tape& tape, Var queries, Var keys_values, Direction dir, bool causal) const {
  if (queries.rows() != keys_values.rows())
    throw ShapeError("cross_attend: length mismatch " + shape_string(queries.shape()) + " vs " +
                     shape_string(keys_values.shape()));
  if (queries.cols() != config_.d || keys_values.cols() != config_.d)
    throw ShapeError("cross_attend: stream width differs from d");
  // Primal: audio queries, motion keys. Dual: motion queries, audio keys.
  const bool primal = dir == Direction::primal;
  Var q = matmul(queries, param(tape, primal ? "fusion.audio_qk" : "fusion.motion_qk"));
  Var k = matmul(keys_values, param(tape, primal ? "fusion.motion_qk" : "fusion.audio_qk"));
  Var v = matmul(keys_values, param(tape, key(dir, "cross_attn.value")));
  Var heads = attention_heads(q, k, v, config_.heads, causal);
  Var projected = matmul(heads, param(tape, key(dir, "cross_attn.output")));
  Var h = norm(tape, queries + projected, key(dir, "cross_attn.norm"));
  Var ff = relu(affine(tape, h, key(dir, "ff.fc1.weight"), key(dir, "ff.fc1.bias")));
  ff = affine(tape, ff, key(dir, "ff.fc2.weight"), key(dir, "ff.fc2.bias"));
  return norm(tape, h + ff, key(dir, "ff.norm"));
}

Var Model::decode_motion(Tape& tape, Var fused) const {
  Var weight = config_.share_transpose_codec ? transpose(param(tape, "motion_encoder.weight"))
                                             : param(tape, "motion_decoder.weight");
  return matmul(fused, weight) + broadcast_row(param(tape, "motion_decoder.bias"), fused.rows());
}

Var Model::decode_audio(Tape& tape, Var fused) const {
  Var hidden = relu(affine(tape, fused, "audio_decoder.hidden.weight", "audio_decoder.hidden.bias"));
  Var weight = config_.share_transpose_codec ? transpose(param(tape, "audio_encoder.weight"))
                                             : param(tape, "audio_decoder.output.weight");
  return matmul(hidden, weight) + broadcast_row(param(tape, "audio_decoder.output.bias"), fused.rows());
}

TaskGraph Model::primal(Tape& tape, Var audio_latent, Var motion_latent, int speaker) const {
  Var past = shift_right(tape, motion_latent, Direction::primal);
  Var attended = self_attend(tape, past, Direction::primal);
  Var modulated = speaker_modulate(tape, attended, style(tape, speaker), Direction::primal);
  Var fused = cross_attend(tape, audio_latent, modulated, Direction::primal);
  return TaskGraph{decode_motion(tape, fused), fused, audio_latent, motion_latent};
}

TaskGraph Model::dual(Tape& tape, Var motion_latent, Var audio_latent, int speaker) const {
  Var past = shift_right(tape, audio_latent, Direction::dual);
  Var attended = self_attend(tape, past, Direction::dual);
  Var modulated = speaker_modulate(tape, attended, style(tape, speaker), Direction::dual);
  Var fused = cross_attend(tape, motion_latent, modulated, Direction::dual);
  return TaskGraph{decode_audio(tape, fused), fused, audio_latent, motion_latent};
}

namespace {

void check_pair_lengths(std::size_t a, std::size_t b, const char* what) {
  if (a != b)
    throw ShapeError(std::string(what) + ": audio has " + std::to_string(a) + " frames, motion has " +
                     std::to_string(b) + "; resample first");
}

}  // namespace

ForwardOutputs Model::forward_primal(const FeatureSequence& features, int speaker,
                                     const MotionSequence& gt_motion) const {
  check_pair_lengths(features.frames(), gt_motion.frames(), "forward_primal");
  Tape tape;
  Var x = encode_audio(tape, tape.constant(features.values));
  Var y = encode_motion(tape, tape.constant(gt_motion.flattened()));
  TaskGraph g = primal(tape, x, y, speaker);
  return ForwardOutputs{
      g.prediction.value().reshaped({gt_motion.frames(), config_.vertices, 3}),
      FeatureSequence{g.fused.value()},
      FeatureSequence{x.value()},
      FeatureSequence{y.value()},
  };
}

ForwardOutputs Model::forward_dual(const MotionSequence& motion, int speaker, const FeatureSequence& gt_features) const {
  check_pair_lengths(gt_features.frames(), motion.frames(), "forward_dual");
  Tape tape;
  Var y = encode_motion(tape, tape.constant(motion.flattened()));
  Var x = encode_audio(tape, tape.constant(gt_features.values));
  TaskGraph g = dual(tape, y, x, speaker);
  return ForwardOutputs{g.prediction.value(), FeatureSequence{g.fused.value()}, FeatureSequence{x.value()},
                        FeatureSequence{y.value()}};
}

MotionSequence Model::generate_motion(const FeatureSequence& features, int speaker, double fps) const {
  const std::size_t frames = features.frames();
  check_length(frames);
  check_speaker(speaker);
  const std::size_t width = config_.vertices * 3;
  // Row t of `history` holds generated frame t; the row at the current step is
  // a placeholder that the shift drops.
  Tensor history({frames, width});
  for (std::size_t t = 0; t < frames; ++t) {
    Tape tape;
    Var audio = tape.constant(Tensor({t + 1, features.dim()},
                                     std::vector<double>(features.values.data(),
                                                         features.values.data() + (t + 1) * features.dim())));
    Var past = tape.constant(Tensor({t + 1, width},
                                    std::vector<double>(history.data(), history.data() + (t + 1) * width)));
    TaskGraph g = primal(tape, encode_audio(tape, audio), encode_motion(tape, past), speaker);
    const Tensor& pred = g.prediction.value();
    std::copy_n(pred.data() + t * width, width, history.data() + t * width);
  }
  return MotionSequence::from_flat(history, fps);
}

FeatureSequence Model::generate_audio(const MotionSequence& motion, int speaker) const {
  const std::size_t frames = motion.frames();
  check_length(frames);
  check_speaker(speaker);
  if (motion.vertices() != config_.vertices) throw ShapeError("generate_audio: vertex count differs from config");
  const std::size_t width = config_.audio_dim;
  const Tensor flat = motion.flattened();
  const std::size_t mwidth = flat.cols();
  Tensor history({frames, width});
  for (std::size_t t = 0; t < frames; ++t) {
    Tape tape;
    Var m = tape.constant(Tensor({t + 1, mwidth}, std::vector<double>(flat.data(), flat.data() + (t + 1) * mwidth)));
    Var past = tape.constant(Tensor({t + 1, width},
                                    std::vector<double>(history.data(), history.data() + (t + 1) * width)));
    TaskGraph g = dual(tape, encode_motion(tape, m), encode_audio(tape, past), speaker);
    const Tensor& pred = g.prediction.value();
    std::copy_n(pred.data() + t * width, width, history.data() + t * width);
  }
  return FeatureSequence{std::move(history)};
}

}  // namespace dualtalker

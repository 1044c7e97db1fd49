// SPDX-License-Identifier: Apache-2.0
#include "dualtalker/config.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cstdio>

#include "binary_io.hpp"
#include "dualtalker/errors.hpp"

namespace dualtalker {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

void require_object(const ordered_json& j, const std::string& section) {
  if (!j.is_object()) throw ConfigError(section + " must be a JSON object");
}

template <typename T>
void read(const ordered_json& value, T& slot, const std::string& where) {
  try {
    if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
      if (!value.is_number_unsigned()) throw ConfigError(where + " must be a non-negative integer");
    }
    slot = value.get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

[[noreturn]] void unknown(const std::string& section, const std::string& key) {
  throw ConfigError(section + ": unknown key '" + key + "'");
}

LossWeights weights_from_json(const ordered_json& j, LossWeights w) {
  require_object(j, "train.weights");
  for (const auto& [key, value] : j.items()) {
    const std::string where = "train.weights." + key;
    if (key == "primal") read(value, w.primal, where);
    else if (key == "dual") read(value, w.dual, where);
    else if (key == "duality") read(value, w.duality, where);
    else if (key == "consistency") read(value, w.consistency, where);
    else unknown("train.weights", key);
  }
  return w;
}

AblationSwitches ablation_from_json(const ordered_json& j, AblationSwitches a) {
  require_object(j, "train.ablation");
  for (const auto& [key, value] : j.items()) {
    const std::string where = "train.ablation." + key;
    if (key == "disable_dual") read(value, a.disable_dual, where);
    else if (key == "disable_ccrl") read(value, a.disable_ccrl, where);
    else if (key == "disable_dr") read(value, a.disable_dr, where);
    else if (key == "share_transpose_codec") read(value, a.share_transpose_codec, where);
    else unknown("train.ablation", key);
  }
  return a;
}

TrainConfig train_from_json(const ordered_json& j, TrainConfig t) {
  require_object(j, "train");
  for (const auto& [key, value] : j.items()) {
    const std::string where = "train." + key;
    if (key == "learning_rate") read(value, t.learning_rate, where);
    else if (key == "beta1") read(value, t.beta1, where);
    else if (key == "beta2") read(value, t.beta2, where);
    else if (key == "epsilon") read(value, t.epsilon, where);
    else if (key == "epochs") read(value, t.epochs, where);
    else if (key == "max_steps") read(value, t.max_steps, where);
    else if (key == "seed") read(value, t.seed, where);
    else if (key == "clip_norm") read(value, t.clip_norm, where);
    else if (key == "weights") t.weights = weights_from_json(value, t.weights);
    else if (key == "ablation") t.ablation = ablation_from_json(value, t.ablation);
    else unknown("train", key);
  }
  return t;
}

CCRLConfig ccrl_from_json(const ordered_json& j, CCRLConfig c) {
  require_object(j, "ccrl");
  for (const auto& [key, value] : j.items()) {
    if (key == "bandwidth") {
      if (value.is_null()) {
        c.bandwidth.reset();
      } else {
        double b = 0.0;
        read(value, b, "ccrl.bandwidth");
        c.bandwidth = b;
      }
    } else if (key == "anchors") {
      std::string mode;
      read(value, mode, "ccrl.anchors");
      if (mode == "uniform") c.anchors = AnchorWeighting::uniform;
      else if (mode == "kernel") c.anchors = AnchorWeighting::kernel;
      else throw ConfigError("ccrl.anchors must be \"uniform\" or \"kernel\"");
    } else {
      unknown("ccrl", key);
    }
  }
  return c;
}

ordered_json optional_indices(const std::optional<std::vector<std::size_t>>& v) {
  return v ? ordered_json(*v) : ordered_json(nullptr);
}

}  // namespace

SyntheticSpec synthetic_spec_from_json(const ordered_json& j, SyntheticSpec s) {
  require_object(j, "synthetic");
  for (const auto& [key, value] : j.items()) {
    const std::string where = "synthetic." + key;
    if (key == "n_speakers") read(value, s.n_speakers, where);
    else if (key == "n_sequences") read(value, s.n_sequences, where);
    else if (key == "frames") read(value, s.frames, where);
    else if (key == "vertices") read(value, s.vertices, where);
    else if (key == "bands") read(value, s.bands, where);
    else if (key == "latent_dim") read(value, s.latent_dim, where);
    else if (key == "window") read(value, s.window, where);
    else if (key == "noise") read(value, s.noise, where);
    else if (key == "seed") read(value, s.seed, where);
    else if (key == "fps") read(value, s.fps, where);
    else if (key == "displacement_scale") read(value, s.displacement_scale, where);
    else unknown("synthetic", key);
  }
  return s;
}

ordered_json to_json(const SyntheticSpec& s) {
  return {{"n_speakers", s.n_speakers}, {"n_sequences", s.n_sequences}, {"frames", s.frames},
          {"vertices", s.vertices},     {"bands", s.bands},             {"latent_dim", s.latent_dim},
          {"window", s.window},         {"noise", s.noise},             {"seed", s.seed},
          {"fps", s.fps},               {"displacement_scale", s.displacement_scale}};
}

CliConfig config_from_json(const ordered_json& j, CliConfig c) {
  require_object(j, "config");
  for (const auto& [key, value] : j.items()) {
    if (key == "synthetic") {
      c.synthetic = synthetic_spec_from_json(value, c.synthetic);
    } else if (key == "model") {
      c.model = model_config_from_json(value, c.model);
    } else if (key == "train") {
      c.train = train_from_json(value, c.train);
    } else if (key == "ccrl") {
      c.train.ccrl = ccrl_from_json(value, c.train.ccrl);
    } else if (key == "regions") {
      require_object(value, "regions");
      for (const auto& [rk, rv] : value.items()) {
        std::vector<std::size_t> indices;
        if (rk != "lip_indices" && rk != "upper_indices") unknown("regions", rk);
        if (rv.is_null()) {
          (rk == "lip_indices" ? c.regions.lip_indices : c.regions.upper_indices).reset();
          continue;
        }
        read(rv, indices, "regions." + rk);
        (rk == "lip_indices" ? c.regions.lip_indices : c.regions.upper_indices) = std::move(indices);
      }
    } else if (key == "paths") {
      require_object(value, "paths");
      for (const auto& [pk, pv] : value.items()) {
        if (pk == "data") read(pv, c.paths.data, "paths.data");
        else if (pk == "out") read(pv, c.paths.out, "paths.out");
        else if (pk == "checkpoint") read(pv, c.paths.checkpoint, "paths.checkpoint");
        else unknown("paths", pk);
      }
    } else {
      unknown("config", key);
    }
  }
  c.train.ablation.share_transpose_codec = c.train.ablation.share_transpose_codec || c.model.share_transpose_codec;
  c.model.share_transpose_codec = c.train.ablation.share_transpose_codec;
  return c;
}

CliConfig load_config(const fs::path& path, CliConfig base) {
  const std::string bytes = io::read_file(path);
  ordered_json j;
  try {
    j = ordered_json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j, std::move(base));
}

ordered_json to_json(const CliConfig& c) {
  const TrainConfig& t = c.train;
  return {{"synthetic", to_json(c.synthetic)},
          {"model", to_json(c.model)},
          {"train",
           {{"learning_rate", t.learning_rate},
            {"beta1", t.beta1},
            {"beta2", t.beta2},
            {"epsilon", t.epsilon},
            {"epochs", t.epochs},
            {"max_steps", t.max_steps},
            {"seed", t.seed},
            {"clip_norm", t.clip_norm},
            {"weights",
             {{"primal", t.weights.primal},
              {"dual", t.weights.dual},
              {"duality", t.weights.duality},
              {"consistency", t.weights.consistency}}},
            {"ablation",
             {{"disable_dual", t.ablation.disable_dual},
              {"disable_ccrl", t.ablation.disable_ccrl},
              {"disable_dr", t.ablation.disable_dr},
              {"share_transpose_codec", t.ablation.share_transpose_codec}}}}},
          {"ccrl",
           {{"bandwidth", t.ccrl.bandwidth ? ordered_json(*t.ccrl.bandwidth) : ordered_json(nullptr)},
            {"anchors", t.ccrl.anchors == AnchorWeighting::uniform ? "uniform" : "kernel"}}},
          {"regions",
           {{"lip_indices", optional_indices(c.regions.lip_indices)},
            {"upper_indices", optional_indices(c.regions.upper_indices)}}},
          {"paths", {{"data", c.paths.data}, {"out", c.paths.out}, {"checkpoint", c.paths.checkpoint}}}};
}

void resolve_against(CliConfig& config, Dataset& dataset) {
  const std::size_t v = dataset.templ.vertex_count();
  config.model.vertices = v;
  if (!dataset.sequences.empty()) config.model.audio_dim = dataset.sequences.front().features.dim();
  config.model.speakers = static_cast<std::size_t>(dataset.manifest.speakers);
  std::size_t longest = 0;
  for (const auto& s : dataset.sequences) longest = std::max(longest, s.motion.frames());
  config.model.max_frames = std::max(config.model.max_frames, longest);
  auto check = [v](const std::vector<std::size_t>& indices, const char* name) {
    if (indices.empty()) throw ConfigError(std::string("regions.") + name + " is empty");
    for (std::size_t i : indices)
      if (i >= v) throw ConfigError(std::string("regions.") + name + " has an index outside [0, V)");
  };
  if (config.regions.lip_indices) {
    check(*config.regions.lip_indices, "lip_indices");
    dataset.manifest.lip_indices = *config.regions.lip_indices;
  }
  if (config.regions.upper_indices) {
    check(*config.regions.upper_indices, "upper_indices");
    dataset.manifest.upper_indices = *config.regions.upper_indices;
  }
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &length, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 computation failed");
  std::string hex;
  char pair[3];
  for (unsigned int i = 0; i < length; ++i) {
    std::snprintf(pair, sizeof pair, "%02x", digest[i]);
    hex += pair;
  }
  return hex;
}

std::string sha256_file(const fs::path& path) {
  return sha256_hex(io::read_file(path));
}

std::string config_hash(const CliConfig& config) { return sha256_hex(to_json(config).dump()); }

fs::path write_run_manifest(const fs::path& out_dir, const std::string& command, const CliConfig& config,
                            std::uint64_t seed, const ordered_json& extra) {
  const fs::path target = out_dir / "run_manifest.json";
  std::vector<fs::path> files;
  std::error_code ec;
  if (fs::exists(out_dir, ec)) {
    for (const auto& entry : fs::recursive_directory_iterator(out_dir))
      if (entry.is_regular_file() && entry.path() != target) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  ordered_json inventory = ordered_json::array();
  for (const auto& f : files)
    inventory.push_back({{"path", fs::relative(f, out_dir).generic_string()},
                         {"bytes", fs::file_size(f)},
                         {"sha256", sha256_file(f)}});
  ordered_json manifest = {{"command", command},
                           {"version", kToolVersion},
                           {"config_hash", config_hash(config)},
                           {"seed", seed},
                           {"config", to_json(config)},
                           {"files", std::move(inventory)}};
  for (const auto& [key, value] : extra.items()) manifest[key] = value;
  const std::string text = manifest.dump(2) + "\n";
  io::write_file(target, text);
  return target;
}

}  // namespace dualtalker

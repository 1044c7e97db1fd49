// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "dualtalker/data.hpp"
#include "dualtalker/model.hpp"
#include "dualtalker/train.hpp"

namespace dualtalker {

inline constexpr const char* kToolVersion = "0.1.0";

/// Region sets that override the ones in a dataset manifest.
struct RegionOverrides {
  std::optional<std::vector<std::size_t>> lip_indices;
  std::optional<std::vector<std::size_t>> upper_indices;
};

struct PathConfig {
  std::string data;
  std::string out;
  std::string checkpoint;
};

/// Everything a command can be configured with. JSON sections:
/// "synthetic", "model", "train" (with "weights" and "ablation"), "ccrl", "regions", "paths".
struct CliConfig {
  SyntheticSpec synthetic;
  ModelConfig model;
  TrainConfig train;
  RegionOverrides regions;
  PathConfig paths;
};

/// Merges `j` onto `base`. Unknown keys and ill-typed values raise ConfigError.
CliConfig config_from_json(const nlohmann::ordered_json& j, CliConfig base = {});
CliConfig load_config(const std::filesystem::path& path, CliConfig base = {});
nlohmann::ordered_json to_json(const CliConfig& config);

SyntheticSpec synthetic_spec_from_json(const nlohmann::ordered_json& j, SyntheticSpec base = {});
nlohmann::ordered_json to_json(const SyntheticSpec& spec);

/// Adopts V, B and the speaker count from the dataset and applies region overrides.
void resolve_against(CliConfig& config, Dataset& dataset);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);
/// Hash of the canonical JSON dump of the resolved configuration.
std::string config_hash(const CliConfig& config);

/// Writes run_manifest.json in `out_dir`: command, tool version, config and its hash,
/// seed, and every file below `out_dir` with size and SHA-256.
std::filesystem::path write_run_manifest(const std::filesystem::path& out_dir, const std::string& command,
                                         const CliConfig& config, std::uint64_t seed,
                                         const nlohmann::ordered_json& extra = nlohmann::ordered_json::object());

}  // namespace dualtalker

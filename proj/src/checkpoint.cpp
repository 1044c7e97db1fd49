// SPDX-License-Identifier: Apache-2.0
#include <set>

#include "binary_io.hpp"
#include "dualtalker/errors.hpp"
#include "dualtalker/model.hpp"

namespace dualtalker {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

CheckpointHeader read_header(io::BinaryReader& r) {
  r.expect_magic("DTCK");
  r.expect_version(kCheckpointVersion);
  const std::uint32_t length = r.u32();
  const std::string text = r.raw(length);
  CheckpointHeader header;
  try {
    const ordered_json j = ordered_json::parse(text);
    header.model = model_config_from_json(j.at("model"));
    header.metadata = j.value("metadata", ordered_json::object());
    const std::string dtype = j.at("dtype").get<std::string>();
    if (dtype != "f64" && dtype != "f32") throw ConfigError("checkpoint: unknown dtype '" + dtype + "'");
    header.single_precision = dtype == "f32";
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::malformed, std::string("checkpoint header: ") + e.what());
  }
  return header;
}

}  // namespace

void save_checkpoint(const fs::path& path, const Model& model, const ordered_json& metadata, bool single_precision) {
  ordered_json header{{"model", to_json(model.config())}, {"metadata", metadata},
                      {"dtype", single_precision ? "f32" : "f64"}};
  const std::string text = header.dump();
  io::BinaryWriter w;
  w.magic("DTCK");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.raw(text);
  w.u32(static_cast<std::uint32_t>(model.parameters().size()));
  for (const Parameter* p : model.parameters()) {
    w.u32(static_cast<std::uint32_t>(p->name().size()));
    w.raw(p->name());
    const Shape& shape = p->value().shape();
    w.u32(static_cast<std::uint32_t>(shape.size()));
    for (std::size_t dim : shape) w.u32(static_cast<std::uint32_t>(dim));
    for (double v : p->value().values()) {
      if (single_precision)
        w.f32(static_cast<float>(v));
      else
        w.f64(v);
    }
  }
  w.save(path);
}

CheckpointHeader read_checkpoint_header(const fs::path& path) {
  auto r = io::BinaryReader::open(path);
  return read_header(r);
}

Model load_checkpoint(const fs::path& path, CheckpointHeader* header_out) {
  auto r = io::BinaryReader::open(path);
  CheckpointHeader header = read_header(r);
  Model model(header.model, 0);
  const std::uint32_t count = r.u32();
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.raw(r.u32());
    const std::uint32_t rank = r.u32();
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(r.u32());
    if (!model.has_parameter(name)) throw ConfigError("checkpoint: parameter '" + name + "' not in model config");
    Parameter& p = model.parameter(name);
    if (shape != p.value().shape())
      throw ConfigError("checkpoint: parameter '" + name + "' has shape " + shape_string(shape) + ", config expects " +
                        shape_string(p.value().shape()));
    r.require(p.value().size() * (header.single_precision ? 4 : 8));
    for (double& v : p.value().values()) v = header.single_precision ? static_cast<double>(r.f32()) : r.f64();
    seen.insert(name);
  }
  if (seen.size() != model.parameters().size()) throw ConfigError("checkpoint: missing parameters");
  if (header_out) *header_out = std::move(header);
  return model;
}

}  // namespace dualtalker

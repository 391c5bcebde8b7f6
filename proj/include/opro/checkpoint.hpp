#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "opro/optim.hpp"
#include "opro/vit.hpp"

namespace opro {

// Layout: 8-byte magic "OPROCKPT", u32 version, u64 header length, a JSON
// header (configs, tensor directory, optimizer step, RNG state, extras),
// then every tensor as raw little-endian doubles in directory order,
// row-major. Adam moments are stored as tensors "adam.m/<name>" and
// "adam.v/<name>".

struct CheckpointData {
  VitConfig model;
  AdapterConfig adapters;
  std::map<std::string, Mat> tensors;
  int adam_steps = 0;
  std::map<std::string, AdamMoments> adam;
  std::string rng_state;
  nlohmann::json extra = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, const VitModel& model, const Adam* optimizer = nullptr,
                     const std::string& rng_state = {}, const nlohmann::json& extra = nlohmann::json::object());

/// FileError on unreadable or malformed files.
CheckpointData read_checkpoint(const std::filesystem::path& path);

/// Rebuild the model (with its adapters and trainable set). FileError if a
/// parameter is missing or has the wrong shape.
VitModel restore_model(const CheckpointData& data);

}  // namespace opro

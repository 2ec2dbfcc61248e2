#pragma once

#include <filesystem>

#include <json.hpp>

#include "fdiag/model.hpp"

namespace fdiag {

// Checkpoint directory: index.json (architecture, tensor names, shapes,
// offsets into the payload) and tensors.bin (raw float32 LE, index order).
void save_checkpoint(const ModelParams<float>& params, const std::filesystem::path& dir);
ModelParams<float> load_checkpoint(const std::filesystem::path& dir);

nlohmann::ordered_json arch_to_json(const ArchConfig& arch);
// Missing keys keep their defaults; unknown keys are rejected with their path.
ArchConfig arch_from_json(const nlohmann::json& j, const std::string& path = "arch");

}  // namespace fdiag

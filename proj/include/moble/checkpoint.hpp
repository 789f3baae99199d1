#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "moble/model.hpp"
#include "moble/trainer.hpp"

namespace moble {

// Binary checkpoint: "MOBL" magic, u16 format version, JSON metadata blob
// (model/training config, seed, epoch losses, ordered parameter manifest),
// then all parameter buffers as little-endian float32 in manifest order.
// Contains nothing nondeterministic, so a bit-identical training run yields
// a byte-identical file and cloning is a plain file copy.

struct CheckpointExtras {
  nlohmann::json train_config;        // object or null
  std::vector<double> epoch_losses;
  std::string device_label;
};

struct LoadedCheckpoint {
  ModelParams model;
  CheckpointExtras extras;
  nlohmann::json metadata;
};

void save_checkpoint(const ModelParams& model, const std::string& path,
                     const CheckpointExtras& extras = {});
LoadedCheckpoint load_checkpoint(const std::string& path);

// Byte-for-byte file copy (the clone control).
void clone_checkpoint(const std::string& src_path, const std::string& dst_path);

bool files_identical(const std::string& a, const std::string& b);

nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Stable hash of (model config, train config, seed); carried in checkpoint
// metadata and in every report table row.
std::string config_hash(const ModelConfig& model_cfg, const nlohmann::json& train_cfg,
                        std::uint64_t seed);

}  // namespace moble

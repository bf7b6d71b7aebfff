#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "nback/tiny/train.hpp"

namespace nback::tiny {

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  Params<float> params;
  std::vector<EpochStats> curve;
  int epoch = 0;
};

// JSON header line (config, seed, epoch, eval curve, tensor index) followed by the flat
// little-endian float32 parameter blob.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json model_config_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json train_config_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

}  // namespace nback::tiny

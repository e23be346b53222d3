#pragma once

#include <json.hpp>

#include "vlplan/dynreward.hpp"
#include "vlplan/genmodel.hpp"
#include "vlplan/trainer.hpp"

namespace vlplan {

// Stable JSON encodings shared by checkpoints and the CLI config. Field
// names double as the dotted CLI flag names.

nlohmann::ordered_json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::ordered_json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

nlohmann::ordered_json reward_params_to_json(const RewardParams& p);
RewardParams reward_params_from_json(const nlohmann::json& j);

// Rejects unknown keys (typo safety for config files).
void check_known_keys(const nlohmann::json& j, const std::vector<std::string>& known,
                      const std::string& scope);

}  // namespace vlplan

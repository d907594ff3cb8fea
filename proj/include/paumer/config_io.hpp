#pragma once

#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "paumer/data.hpp"
#include "paumer/model.hpp"
#include "paumer/training.hpp"

namespace paumer {

// Rejects any key not in `allowed`; context names the JSON section in errors.
void check_known_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                      const std::string& context);

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

nlohmann::json task_config_to_json(const SyntheticTaskConfig& cfg);
SyntheticTaskConfig task_config_from_json(const nlohmann::json& j);

}  // namespace paumer

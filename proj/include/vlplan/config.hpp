#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "vlplan/dynreward.hpp"
#include "vlplan/genmodel.hpp"
#include "vlplan/trainer.hpp"

namespace vlplan {

// Merged run configuration: JSON config file plus dotted-name command-line
// overrides; unknown keys are rejected and the effective config is echoed
// into the run directory.
struct RunConfig {
    ModelConfig model = ModelConfig::desk_default();
    TrainConfig train;
    RewardParams reward;
    std::string data;       // dataset JSONL path
    std::string run_dir;    // output directory (VLPLAN_RUN_ROOT prefixes relative paths)
    std::string init_ckpt;  // checkpoint to continue from
    bool resume = false;
};

// Leaf keys acceptable as --<dotted.name> overrides, e.g. "model.d_model".
std::vector<std::string> run_config_keys();

RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::ordered_json run_config_to_json(const RunConfig& cfg);

// Loads the file (empty path = defaults) and applies "key=value" overrides;
// values are parsed as JSON scalars where possible.
RunConfig load_run_config(const std::string& config_path,
                          const std::vector<std::string>& overrides);

// Resolves run_dir against VLPLAN_RUN_ROOT, creates it, writes config.json.
std::string prepare_run_dir(const RunConfig& cfg);

}  // namespace vlplan

#include "vlplan/config.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "vlplan/json_io.hpp"

namespace vlplan {

namespace {

nlohmann::ordered_json paths_to_json(const RunConfig& cfg) {
    nlohmann::ordered_json j;
    j["data"] = cfg.data;
    j["run_dir"] = cfg.run_dir;
    j["init_ckpt"] = cfg.init_ckpt;
    j["resume"] = cfg.resume;
    return j;
}

}  // namespace

std::vector<std::string> run_config_keys() {
    std::vector<std::string> keys;
    const RunConfig defaults;
    const nlohmann::ordered_json j = run_config_to_json(defaults);
    for (auto sec = j.begin(); sec != j.end(); ++sec)
        for (auto leaf = sec.value().begin(); leaf != sec.value().end(); ++leaf)
            keys.push_back(sec.key() + "." + leaf.key());
    return keys;
}

nlohmann::ordered_json run_config_to_json(const RunConfig& cfg) {
    nlohmann::ordered_json j;
    j["model"] = model_config_to_json(cfg.model);
    j["train"] = train_config_to_json(cfg.train);
    j["reward"] = reward_params_to_json(cfg.reward);
    j["paths"] = paths_to_json(cfg);
    return j;
}

RunConfig run_config_from_json(const nlohmann::json& j) {
    check_known_keys(j, {"model", "train", "reward", "paths"}, "");
    RunConfig cfg;
    if (j.contains("model")) cfg.model = model_config_from_json(j["model"]);
    if (j.contains("train")) cfg.train = train_config_from_json(j["train"]);
    if (j.contains("reward")) cfg.reward = reward_params_from_json(j["reward"]);
    if (j.contains("paths")) {
        const auto& p = j["paths"];
        check_known_keys(p, {"data", "run_dir", "init_ckpt", "resume"}, "paths.");
        cfg.data = p.value("data", cfg.data);
        cfg.run_dir = p.value("run_dir", cfg.run_dir);
        cfg.init_ckpt = p.value("init_ckpt", cfg.init_ckpt);
        cfg.resume = p.value("resume", cfg.resume);
    }
    return cfg;
}

RunConfig load_run_config(const std::string& config_path,
                          const std::vector<std::string>& overrides) {
    nlohmann::json merged = run_config_to_json(RunConfig{});
    if (!config_path.empty()) {
        std::ifstream in(config_path);
        require(in.good(), ErrorKind::Io, "cannot open config: " + config_path);
        nlohmann::json file = nlohmann::json::parse(in, nullptr, true);
        // Validate structure before merging.
        (void)run_config_from_json(file);
        merged.merge_patch(file);
    }
    for (const auto& ov : overrides) {
        const auto eq = ov.find('=');
        require(eq != std::string::npos, ErrorKind::BadConfig,
                "override must be key=value: " + ov);
        const std::string key = ov.substr(0, eq);
        const std::string raw = ov.substr(eq + 1);
        const auto dot = key.find('.');
        require(dot != std::string::npos, ErrorKind::BadConfig,
                "override key must be dotted (section.field): " + key);
        const std::string section = key.substr(0, dot);
        const std::string field = key.substr(dot + 1);
        require(merged.contains(section) && merged[section].contains(field), ErrorKind::BadConfig,
                "unknown config key '" + key + "'");
        nlohmann::json value;
        try {
            value = nlohmann::json::parse(raw);
        } catch (const nlohmann::json::parse_error&) {
            value = raw;  // plain string
        }
        // Keep the field's type: a string field keeps raw text even if it
        // parses as a number.
        if (merged[section][field].is_string() && !value.is_string()) value = raw;
        merged[section][field] = value;
    }
    return run_config_from_json(merged);
}

std::string prepare_run_dir(const RunConfig& cfg) {
    require(!cfg.run_dir.empty(), ErrorKind::BadConfig, "run_dir is required");
    std::filesystem::path dir(cfg.run_dir);
    if (dir.is_relative()) {
        if (const char* root = std::getenv("VLPLAN_RUN_ROOT")) dir = std::filesystem::path(root) / dir;
    }
    std::filesystem::create_directories(dir);
    std::ofstream out(dir / "config.json");
    require(out.good(), ErrorKind::Io, "cannot write config echo");
    out << run_config_to_json(cfg).dump(2) << '\n';
    return dir.string();
}

}  // namespace vlplan

#pragma once

#include <cstdlib>
#include <fstream>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "treeact/planner.hpp"

namespace treeact {

// Layered settings: environment variables load first (lowest precedence),
// then the config file, then command-line flags on top.
struct AppConfig {
    std::string endpoint;
    std::string api_key;
    std::string model = "gpt-3.5-turbo";
    std::string tool_config; // path to the tool registry file
    std::string subtask_examples_dir;

    RewardConfig reward;
    Limits limits;
    SelectionPolicy policy = SelectionPolicy::mcts;

    void apply_env() {
        if (const char* v = std::getenv("TREEACT_ENDPOINT")) endpoint = v;
        if (const char* v = std::getenv("TREEACT_API_KEY")) api_key = v;
        if (const char* v = std::getenv("TREEACT_MODEL")) model = v;
    }

    void apply_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open config file: " + path);
        nlohmann::json j = nlohmann::json::parse(in);
        if (!j.is_object()) throw std::runtime_error("config file must hold a JSON object: " + path);
        endpoint = j.value("endpoint", endpoint);
        api_key = j.value("api_key", api_key);
        model = j.value("model", model);
        tool_config = j.value("tool_config", tool_config);
        subtask_examples_dir = j.value("subtask_examples_dir", subtask_examples_dir);
        if (j.contains("limits")) {
            const auto& l = j["limits"];
            limits.max_depth = l.value("max_depth", limits.max_depth);
            limits.max_children = l.value("max_children", limits.max_children);
            limits.parse_retries = l.value("parse_retries", limits.parse_retries);
        }
        if (j.contains("defaults")) {
            const auto& d = j["defaults"];
            reward.alpha = d.value("alpha", reward.alpha);
            reward.beta = d.value("beta", reward.beta);
            reward.iterations = d.value("n", reward.iterations);
            if (d.contains("policy")) {
                auto p = parse_selection_policy(d["policy"].get<std::string>());
                if (!p) throw std::runtime_error("config: unknown policy " + d["policy"].get<std::string>());
                policy = *p;
            }
        }
    }
};

} // namespace treeact

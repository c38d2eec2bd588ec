#pragma once

#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "treeact/aggregator.hpp"
#include "treeact/backend.hpp"
#include "treeact/planner.hpp"
#include "treeact/toolkit.hpp"

namespace treeact {

// A desk-scale stand-in for a video QA sample: a W-ary branch tree of
// depth D explored through one tool. Terminal branches either reach the
// correct label or dead-end in an unusable completion, so a planner must
// search to find a success path.
struct SyntheticTask {
    std::uint64_t seed = 0;
    int width = 3;
    int depth = 2;
    double failure_ratio = 0.5;

    std::string video_ref = "synthetic.mp4";
    std::string question = "Which branch of the recording reaches the marked goal?";
    std::vector<std::string> choices = {"A", "B", "C", "D"};
    std::string correct_label = "B";

    // context (branch path like "0/2") → the completion scripted there
    std::map<std::string, std::string> tool_graph;
    std::set<std::string> success_paths;
    std::set<std::string> distractor_paths;
};

namespace detail {

inline std::string synthetic_continuation(const SyntheticTask& task, const std::string& child_path) {
    return std::string("Thought: explore segment ") + child_path + " next\nAction: Explore\n" +
           "Action Input: " + task.video_ref + "#" + child_path;
}

inline std::string synthetic_terminal(const SyntheticTask& task, const std::string& path) {
    if (task.success_paths.count(path))
        return "Thought: this path reaches the goal\nFinal Answer: " + task.correct_label;
    return "The segments here do not connect to anything conclusive.";
}

inline int synthetic_path_depth(const std::string& path) {
    if (path.empty()) return 0;
    return static_cast<int>(std::count(path.begin(), path.end(), '/')) + 1;
}

} // namespace detail

// Deterministic task construction: terminal branches draw failure at the
// given ratio from the task seed; at least one success path always exists.
inline SyntheticTask generate_task(std::uint64_t seed, int width, int depth, double failure_ratio) {
    if (width < 2) throw std::invalid_argument("width must be >= 2");
    if (depth < 1) throw std::invalid_argument("depth must be >= 1");
    if (failure_ratio <= 0.0 || failure_ratio >= 1.0)
        throw std::invalid_argument("failure_ratio must lie in (0,1)");

    SyntheticTask task;
    task.seed = seed;
    task.width = width;
    task.depth = depth;
    task.failure_ratio = failure_ratio;

    std::mt19937_64 gen(seed);
    auto uniform = [&gen]() { return static_cast<double>(gen() >> 11) * 0x1.0p-53; };

    // lexicographic path enumeration, shallow to deep
    std::vector<std::string> frontier{""};
    std::vector<std::string> terminals;
    for (int level = 1; level <= depth; ++level) {
        std::vector<std::string> next;
        for (const auto& p : frontier) {
            for (int c = 0; c < width; ++c) {
                std::string child = p.empty() ? std::to_string(c) : p + "/" + std::to_string(c);
                next.push_back(child);
            }
        }
        frontier = std::move(next);
        if (level == depth) terminals = frontier;
    }
    for (const auto& t : terminals) {
        if (uniform() < failure_ratio) task.distractor_paths.insert(t);
        else task.success_paths.insert(t);
    }
    if (task.success_paths.empty()) {
        size_t idx = static_cast<size_t>(uniform() * static_cast<double>(terminals.size()));
        if (idx >= terminals.size()) idx = terminals.size() - 1;
        task.distractor_paths.erase(terminals[idx]);
        task.success_paths.insert(terminals[idx]);
    }

    // contexts for every non-root position; ≤ Σ_{k=1..depth} width^k entries
    std::vector<std::string> all{""};
    for (int level = 1; level <= depth; ++level) {
        std::vector<std::string> next;
        for (const auto& p : all) {
            if (detail::synthetic_path_depth(p) != level - 1) continue;
            for (int c = 0; c < width; ++c) {
                std::string child = p.empty() ? std::to_string(c) : p + "/" + std::to_string(c);
                task.tool_graph[child] = detail::synthetic_path_depth(child) == depth
                                             ? detail::synthetic_terminal(task, child)
                                             : detail::synthetic_continuation(task, child + "/0");
                next.push_back(child);
            }
        }
        all.insert(all.end(), next.begin(), next.end());
    }
    return task;
}

// The scripted "model": reads its position out of the rendered prompt, honors
// the expansion prompt's avoid-list by taking the smallest untried branch,
// and replays the task's terminal completions at depth D.
inline FnBackend::Fn synthetic_model(SyntheticTask task) {
    return [task = std::move(task)](const ChatRequest& req) -> std::string {
        std::string prompt = req.turns.front().text;

        // pull the expansion block out, collecting forbidden branch options
        std::set<int> forbidden;
        size_t block_start = prompt.find("I have thought about the next action before");
        if (block_start != std::string::npos) {
            const std::string end_marker = "I want to think out a different action.";
            size_t block_end = prompt.find(end_marker, block_start);
            if (block_end != std::string::npos) block_end += end_marker.size();
            else block_end = prompt.size();
            std::string block = prompt.substr(block_start, block_end - block_start);
            prompt.erase(block_start, block_end - block_start);
            for (const auto& line : split_lines(block)) {
                std::string rest;
                if (!detail::take_marker(line, kActionInputMarker, rest)) continue;
                size_t hash = rest.find('#');
                if (hash == std::string::npos) continue;
                std::string path = trim(rest.substr(hash + 1));
                size_t seg = path.rfind('/');
                std::string last = seg == std::string::npos ? path : path.substr(seg + 1);
                try {
                    forbidden.insert(std::stoi(last));
                } catch (...) {
                }
            }
        }

        // current position = last real action input remaining in the prompt
        std::string position;
        for (const auto& line : split_lines(prompt)) {
            std::string rest;
            if (!detail::take_marker(line, kActionInputMarker, rest)) continue;
            size_t hash = rest.find('#');
            if (hash == std::string::npos) continue;
            std::string path = trim(rest.substr(hash + 1));
            size_t suffix = path.find(" [iteration");
            if (suffix != std::string::npos) path = trim(path.substr(0, suffix));
            position = path;
        }

        if (detail::synthetic_path_depth(position) >= task.depth) {
            auto it = task.tool_graph.find(position);
            if (it != task.tool_graph.end()) return it->second;
            return "The segments here do not connect to anything conclusive.";
        }

        int choice = 0;
        while (choice < task.width && forbidden.count(choice)) ++choice;
        if (choice >= task.width) choice = 0; // exhausted: duplicate, planner rejects it
        std::string child =
            position.empty() ? std::to_string(choice) : position + "/" + std::to_string(choice);
        return detail::synthetic_continuation(task, child);
    };
}

inline ToolRegistry make_task_registry() {
    ToolRegistry registry;
    registry.add(ToolSpec{"Explore",
                          "Inspects one branch segment of the recording. The inputs are the video "
                          "path and the branch path joined by '#'. For example: inputs is "
                          "synthetic.mp4#0/1",
                          ToolKind::subtask},
                 [](const ToolInvocation& inv, const ToolContext&) {
                     return "Segment " + inv.sub_question + " inspected.";
                 });
    return registry;
}

struct TaskRunOutcome {
    SessionResult session;
    std::int64_t api_calls = 0;
    bool success = false;
    int first_success_iteration = 0; // 0 when no success
};

inline TaskRunOutcome run_task(const SyntheticTask& task, const ToolRegistry& registry,
                               SelectionPolicy policy, const RewardConfig& reward) {
    FnBackend model(synthetic_model(task));
    MeteredBackend metered(model);

    PlannerConfig config;
    config.reward = reward;
    config.limits.max_depth = task.depth + 1;
    config.limits.max_children = task.width;
    config.policy = policy;
    config.seed = task.seed;

    TaskRunOutcome outcome;
    outcome.session = run_planner(task.question, task.video_ref, nullptr, registry, metered, config);
    outcome.api_calls = metered.calls();
    if (!outcome.session.answers.empty()) {
        auto label = vote(outcome.session.answers, task.choices);
        outcome.success = label && *label == task.correct_label;
        if (outcome.success) outcome.first_success_iteration = outcome.session.answers.front().iteration;
    }
    return outcome;
}

struct PolicyStats {
    std::string policy;
    int tasks = 0;
    int successes = 0;
    double success_rate = 0.0;
    double mean_iterations_to_first_success = 0.0; // over successful tasks
    double mean_api_calls = 0.0;
};

struct AblationReport {
    double alpha = 1.0;
    double beta = 0.5;
    int iterations = 2;
    int task_count = 0;
    std::vector<PolicyStats> policies;

    const PolicyStats* find(const std::string& policy) const {
        for (const auto& p : policies)
            if (p.policy == policy) return &p;
        return nullptr;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["N"] = iterations;
        j["alpha"] = alpha;
        j["beta"] = beta;
        j["task_count"] = task_count;
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& p : policies) {
            nlohmann::json row;
            row["policy"] = p.policy;
            row["tasks"] = p.tasks;
            row["successes"] = p.successes;
            row["success_rate"] = p.success_rate;
            if (p.successes > 0) row["mean_iterations_to_first_success"] = p.mean_iterations_to_first_success;
            else row["mean_iterations_to_first_success"] = nullptr;
            row["mean_api_calls"] = p.mean_api_calls;
            rows.push_back(std::move(row));
        }
        j["policies"] = std::move(rows);
        return j;
    }

    std::string to_text() const {
        std::ostringstream os;
        os << "tasks=" << task_count << " N=" << iterations << " alpha=" << alpha
           << " beta=" << beta << "\n";
        os << std::left << std::setw(9) << "policy" << std::right << std::setw(7) << "tasks"
           << std::setw(11) << "successes" << std::setw(14) << "success_rate" << std::setw(16)
           << "first_success" << std::setw(12) << "api_calls" << "\n";
        for (const auto& p : policies) {
            char rate[32], first[32], calls[32];
            std::snprintf(rate, sizeof rate, "%.4f", p.success_rate);
            if (p.successes > 0)
                std::snprintf(first, sizeof first, "%.4f", p.mean_iterations_to_first_success);
            else
                std::snprintf(first, sizeof first, "n/a");
            std::snprintf(calls, sizeof calls, "%.4f", p.mean_api_calls);
            os << std::left << std::setw(9) << p.policy << std::right << std::setw(7) << p.tasks
               << std::setw(11) << p.successes << std::setw(14) << rate << std::setw(16) << first
               << std::setw(12) << calls << "\n";
        }
        return os.str();
    }
};

// Runs every (policy, task) pair with the task's scripted model and reduces
// to per-policy statistics. Deterministic given (seeds, config, policies).
inline AblationReport evaluate(const std::vector<SelectionPolicy>& policies,
                               const std::vector<SyntheticTask>& tasks,
                               const RewardConfig& reward) {
    if (tasks.empty()) throw std::invalid_argument("evaluate requires at least one task");
    AblationReport report;
    report.alpha = reward.alpha;
    report.beta = reward.beta;
    report.iterations = reward.iterations;
    report.task_count = static_cast<int>(tasks.size());
    ToolRegistry registry = make_task_registry();
    for (SelectionPolicy policy : policies) {
        PolicyStats stats;
        stats.policy = selection_policy_name(policy);
        stats.tasks = static_cast<int>(tasks.size());
        double iter_sum = 0, call_sum = 0;
        for (const auto& task : tasks) {
            TaskRunOutcome outcome = run_task(task, registry, policy, reward);
            call_sum += static_cast<double>(outcome.api_calls);
            if (outcome.success) {
                ++stats.successes;
                iter_sum += outcome.first_success_iteration;
            }
        }
        stats.success_rate = static_cast<double>(stats.successes) / static_cast<double>(stats.tasks);
        stats.mean_iterations_to_first_success =
            stats.successes > 0 ? iter_sum / stats.successes : 0.0;
        stats.mean_api_calls = call_sum / static_cast<double>(tasks.size());
        report.policies.push_back(std::move(stats));
    }
    return report;
}

inline std::vector<SyntheticTask> generate_tasks(std::uint64_t first_seed, int count, int width,
                                                 int depth, double failure_ratio) {
    std::vector<SyntheticTask> tasks;
    tasks.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i)
        tasks.push_back(generate_task(first_seed + static_cast<std::uint64_t>(i), width, depth,
                                      failure_ratio));
    return tasks;
}

} // namespace treeact

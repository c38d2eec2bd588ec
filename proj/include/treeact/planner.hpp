#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "treeact/backend.hpp"
#include "treeact/memory.hpp"
#include "treeact/prompt.hpp"
#include "treeact/react.hpp"
#include "treeact/toolkit.hpp"

namespace treeact {

enum class SelectionPolicy { mcts, dfs, root, uniform };

inline const char* selection_policy_name(SelectionPolicy p) {
    switch (p) {
        case SelectionPolicy::mcts: return "mcts";
        case SelectionPolicy::dfs: return "dfs";
        case SelectionPolicy::root: return "root";
        case SelectionPolicy::uniform: return "uniform";
    }
    return "?";
}

inline std::optional<SelectionPolicy> parse_selection_policy(const std::string& name) {
    if (name == "mcts") return SelectionPolicy::mcts;
    if (name == "dfs") return SelectionPolicy::dfs;
    if (name == "root") return SelectionPolicy::root;
    if (name == "uniform") return SelectionPolicy::uniform;
    return std::nullopt;
}

struct RewardConfig {
    double alpha = 1.0; // base reward magnitude, > 0
    double beta = 0.5;  // decay rate, >= 0
    int iterations = 2; // N

    void validate() const {
        if (alpha <= 0) throw std::invalid_argument("alpha must be positive");
        if (beta < 0) throw std::invalid_argument("beta must be non-negative");
        if (iterations < 1) throw std::invalid_argument("iteration count must be >= 1");
    }
};

struct Limits {
    int max_depth = 8;
    int max_children = 0; // 0 → number of registered tools
    int parse_retries = 2;
};

enum class NodeOutcome { open, failure, nonfailure };

inline const char* node_outcome_name(NodeOutcome o) {
    switch (o) {
        case NodeOutcome::open: return "open";
        case NodeOutcome::failure: return "failure";
        case NodeOutcome::nonfailure: return "nonfailure";
    }
    return "?";
}

struct TreeNode {
    int id = 0;
    std::optional<int> parent;
    std::vector<int> children;
    int depth = 0; // edges from the root

    std::optional<ReactStep> step; // absent on the root and final-answer leaves
    std::string final_thought;
    std::optional<std::string> final_answer;

    double reward = 0.0;
    std::vector<std::pair<int, double>> reward_history; // (iteration, delta)
    NodeOutcome outcome = NodeOutcome::open;

    bool terminal() const { return outcome != NodeOutcome::open; }
};

struct SearchExhausted : std::runtime_error {
    SearchExhausted() : std::runtime_error("no expandable node remains") {}
};

class PlannerTree {
public:
    explicit PlannerTree(std::string question = "") : question_(std::move(question)) {
        nodes_.push_back(TreeNode{});
    }

    const std::string& question() const { return question_; }
    size_t size() const { return nodes_.size(); }
    TreeNode& node(int id) { return nodes_.at(static_cast<size_t>(id)); }
    const TreeNode& node(int id) const { return nodes_.at(static_cast<size_t>(id)); }
    const std::vector<TreeNode>& nodes() const { return nodes_; }

    int add_child(int parent_id, TreeNode proto) {
        TreeNode& p = node(parent_id);
        proto.id = static_cast<int>(nodes_.size());
        proto.parent = parent_id;
        proto.depth = p.depth + 1;
        p.children.push_back(proto.id);
        nodes_.push_back(std::move(proto));
        return nodes_.back().id;
    }

    // Open nodes with spare child capacity, ascending id.
    std::vector<int> expandable(int max_children) const {
        std::vector<int> ids;
        for (const auto& n : nodes_)
            if (n.outcome == NodeOutcome::open && static_cast<int>(n.children.size()) < max_children)
                ids.push_back(n.id);
        return ids;
    }

    std::vector<int> path_from_root(int id) const {
        std::vector<int> path;
        for (std::optional<int> cur = id; cur; cur = node(*cur).parent) path.push_back(*cur);
        std::reverse(path.begin(), path.end());
        return path;
    }

    // Formatted ReAct blocks along root→id, final answer included if the
    // endpoint is a nonfailure leaf.
    std::string transcript(int id) const {
        std::string out;
        for (int nid : path_from_root(id)) {
            const TreeNode& n = node(nid);
            if (n.step) out += format_step(*n.step);
            if (n.final_answer) out += format_final(n.final_thought, *n.final_answer);
        }
        return out;
    }

    double path_reward(int id) const {
        double sum = 0;
        for (int nid : path_from_root(id)) sum += node(nid).reward;
        return sum;
    }

private:
    std::string question_;
    std::vector<TreeNode> nodes_;
};

// ── Seeded randomness ───────────────────────────────────────────────────

// mt19937_64 output is pinned by the standard; the bit-shift mapping keeps
// uniform doubles identical across platforms (library distributions are
// implementation-defined and would break trace reproducibility).
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed) : gen_(seed) {}

    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

private:
    std::mt19937_64 gen_;
};

inline std::vector<double> softmax(const std::vector<double>& values) {
    std::vector<double> probs(values.size(), 0.0);
    if (values.empty()) return probs;
    double mx = *std::max_element(values.begin(), values.end());
    double sum = 0;
    for (size_t i = 0; i < values.size(); ++i) {
        probs[i] = std::exp(values[i] - mx);
        sum += probs[i];
    }
    for (double& p : probs) p /= sum;
    return probs;
}

inline size_t sample_index(const std::vector<double>& probs, double u) {
    double cum = 0;
    for (size_t i = 0; i < probs.size(); ++i) {
        cum += probs[i];
        if (u < cum) return i;
    }
    return probs.empty() ? 0 : probs.size() - 1;
}

// Phase 1. mcts samples Softmax over candidate rewards; dfs takes the
// deepest candidate (ties → highest id); root always returns v_0; uniform
// samples equiprobably. Only mcts and uniform consume randomness.
inline int select_node(const PlannerTree& tree, SelectionPolicy policy, SeededRng& rng,
                       int max_children) {
    if (policy == SelectionPolicy::root) return 0;
    std::vector<int> candidates = tree.expandable(max_children);
    if (candidates.empty()) throw SearchExhausted{};
    switch (policy) {
        case SelectionPolicy::mcts: {
            std::vector<double> rewards;
            rewards.reserve(candidates.size());
            for (int id : candidates) rewards.push_back(tree.node(id).reward);
            return candidates[sample_index(softmax(rewards), rng.uniform())];
        }
        case SelectionPolicy::uniform: {
            size_t idx = static_cast<size_t>(rng.uniform() * static_cast<double>(candidates.size()));
            if (idx >= candidates.size()) idx = candidates.size() - 1;
            return candidates[idx];
        }
        case SelectionPolicy::dfs: {
            int best = candidates.front();
            for (int id : candidates) {
                const TreeNode& n = tree.node(id);
                const TreeNode& b = tree.node(best);
                if (n.depth > b.depth || (n.depth == b.depth && n.id > b.id)) best = id;
            }
            return best;
        }
        default: return 0;
    }
}

// Phase 4. The leaf's reward is set to ±α directly; every strict ancestor
// v_i up to the root receives R_l · e^{β(1−d)} with d the edge count from
// the leaf. Deltas are logged per iteration for tracing.
inline void backpropagate(PlannerTree& tree, int leaf_id, const RewardConfig& config,
                          int iteration) {
    TreeNode& leaf = tree.node(leaf_id);
    if (leaf.outcome == NodeOutcome::open)
        throw std::logic_error("backpropagate requires a finished leaf");
    double r = leaf.outcome == NodeOutcome::nonfailure ? config.alpha : -config.alpha;
    leaf.reward = r;
    leaf.reward_history.emplace_back(iteration, r);
    int d = 1;
    for (std::optional<int> cur = leaf.parent; cur; cur = tree.node(*cur).parent, ++d) {
        double delta = r * std::exp(config.beta * (1.0 - d));
        TreeNode& n = tree.node(*cur);
        n.reward += delta;
        n.reward_history.emplace_back(iteration, delta);
    }
}

// ── Session plumbing ────────────────────────────────────────────────────

struct Answer {
    std::string text;
    int leaf_id = 0;
    std::string path; // root-to-leaf transcript
    double path_reward = 0.0;
    int iteration = 0;
};

struct PlannerConfig {
    RewardConfig reward;
    Limits limits;
    SelectionPolicy policy = SelectionPolicy::mcts;
    std::uint64_t seed = 0;
};

struct SessionResult {
    std::vector<Answer> answers;
    PlannerTree tree{""};
    std::vector<std::pair<int, int>> selections; // (iteration, node id)
    nlohmann::json trace;
};

inline std::string build_expansion_prompt(const std::vector<ReactStep>& prior) {
    if (prior.empty()) return "";
    std::string out = "I have thought about the next action before, such as:\n";
    for (const auto& s : prior) out += format_step_pending(s);
    out += "I want to think out a different action.\n";
    return out;
}

namespace detail {

class PlannerSession {
public:
    PlannerSession(std::string question, std::string video_ref, const TaskMemory* memory,
                   const ToolRegistry& registry, ChatBackend& backend, PlannerConfig config)
        : tree_(question), question_(std::move(question)), video_ref_(std::move(video_ref)),
          memory_(memory), registry_(registry), backend_(backend), config_(std::move(config)),
          rng_(config_.seed) {
        config_.reward.validate();
        if (config_.limits.max_children <= 0)
            config_.limits.max_children = static_cast<int>(registry_.size());
        if (config_.limits.max_children <= 0) config_.limits.max_children = 1;
        if (config_.limits.max_depth < 1) config_.limits.max_depth = 1;
        if (config_.limits.parse_retries < 0) config_.limits.parse_retries = 0;
    }

    SessionResult run() {
        SessionResult result;
        for (int iteration = 1; iteration <= config_.reward.iterations; ++iteration) {
            int selected;
            try {
                selected = select_node(tree_, config_.policy, rng_, config_.limits.max_children);
            } catch (const SearchExhausted&) {
                break;
            }
            result.selections.emplace_back(iteration, selected);
            int child = expand(selected, iteration);
            int leaf = tree_.node(child).terminal() ? child : execute_chain(child, iteration);
            backpropagate(tree_, leaf, config_.reward, iteration);
            const TreeNode& leaf_node = tree_.node(leaf);
            if (leaf_node.outcome == NodeOutcome::nonfailure && leaf_node.final_answer) {
                Answer a;
                a.text = *leaf_node.final_answer;
                a.leaf_id = leaf;
                a.path = tree_.transcript(leaf);
                a.path_reward = tree_.path_reward(leaf);
                a.iteration = iteration;
                result.answers.push_back(std::move(a));
            }
        }
        result.tree = std::move(tree_);
        result.trace = build_trace(result);
        return result;
    }

private:
    ChatResponse complete_with(std::vector<ChatTurn> turns) {
        ChatRequest req;
        req.turns = std::move(turns);
        req.stop_sequences = {kObservationMarker};
        return backend_.complete(req);
    }

    std::string render(const std::string& ancestor_history, const std::string& expansion_prompt,
                       const std::string& scratchpad) const {
        PlannerPromptContext ctx;
        ctx.video_filename = video_ref_;
        ctx.input_question = question_;
        ctx.tool_names = registry_.names_csv();
        ctx.tool_descriptions = registry_descriptions(registry_);
        ctx.ancestor_history = ancestor_history;
        ctx.expansion_prompt = expansion_prompt;
        ctx.agent_scratchpad = scratchpad;
        return render_planner_prompt(ctx);
    }

    // A structurally valid failure block even when the completion was
    // unusable; suffixes the iteration when an identical sibling exists so
    // sibling (action, input) pairs stay distinct.
    ReactStep failure_step(int parent_id, const ParsedCompletion& parsed, const std::string& raw,
                           const std::string& reason, int iteration) {
        ReactStep step;
        if (parsed.is_step()) {
            step.thought = parsed.thought;
            step.action = parsed.action;
            step.action_input = parsed.action_input;
        } else {
            step.thought = parsed.thought.empty() ? "(no usable completion)" : parsed.thought;
            step.action = "InvalidCompletion";
            std::string collapsed;
            for (const auto& line : split_lines(raw)) {
                if (!collapsed.empty()) collapsed += ' ';
                collapsed += trim(line);
            }
            step.action_input = collapsed;
        }
        for (int sib : tree_.node(parent_id).children) {
            const TreeNode& s = tree_.node(sib);
            if (s.step && s.step->action == step.action && s.step->action_input == step.action_input) {
                step.action_input += " [iteration " + std::to_string(iteration) + "]";
                break;
            }
        }
        step.observation = sanitize_observation(reason);
        return step;
    }

    int add_failure_leaf(int parent_id, ReactStep step) {
        TreeNode proto;
        proto.step = std::move(step);
        proto.outcome = NodeOutcome::failure;
        return tree_.add_child(parent_id, proto);
    }

    int add_final_leaf(int parent_id, const ParsedCompletion& parsed) {
        TreeNode proto;
        proto.final_thought = parsed.thought;
        proto.final_answer = parsed.answer;
        proto.outcome = NodeOutcome::nonfailure;
        return tree_.add_child(parent_id, proto);
    }

    // Phase 2. One new child under `selected` whose (action, input) differs
    // from every sibling's; grammar, tool-name and separator violations are
    // retried with correction turns, then materialized as a failure leaf.
    int expand(int selected, int iteration) {
        std::vector<ReactStep> prior;
        for (int sib : tree_.node(selected).children) {
            const TreeNode& s = tree_.node(sib);
            if (s.step) prior.push_back(*s.step);
        }
        std::string prompt =
            render(tree_.transcript(selected), build_expansion_prompt(prior), "");
        std::vector<ChatTurn> turns{{"user", prompt}};

        ParsedCompletion last_parsed;
        std::string last_raw, last_reason = "no completion";
        for (int attempt = 0; attempt <= config_.limits.parse_retries; ++attempt) {
            ChatResponse resp = complete_with(turns);
            last_raw = resp.text;
            last_parsed = parse_completion(resp.text);
            if (last_parsed.is_final()) return add_final_leaf(selected, last_parsed);
            std::string problem;
            if (last_parsed.is_error()) {
                problem = last_parsed.error;
            } else {
                InvocationResult inv =
                    parse_invocation(last_parsed.action, last_parsed.action_input, registry_);
                if (!inv.ok()) {
                    problem = inv.error;
                } else if (duplicates_sibling(selected, *inv.invocation)) {
                    problem = "that action was already tried from this state; choose a different "
                              "(Action, Action Input) pair";
                } else {
                    TreeNode proto;
                    proto.step = ReactStep{last_parsed.thought, last_parsed.action,
                                           last_parsed.action_input, ""};
                    return tree_.add_child(selected, proto);
                }
            }
            last_reason = problem;
            turns.push_back({"assistant", resp.text});
            turns.push_back({"user", "Your reply was not usable: " + problem +
                                         "\nContinue from the same state and follow the format "
                                         "exactly."});
        }
        return add_failure_leaf(selected,
                                failure_step(selected, last_parsed, last_raw,
                                             "EXPANSION_FAILED: " + last_reason, iteration));
    }

    bool duplicates_sibling(int parent_id, const ToolInvocation& inv) const {
        for (int sib : tree_.node(parent_id).children) {
            const TreeNode& s = tree_.node(sib);
            if (!s.step) continue;
            InvocationResult other = parse_invocation(s.step->action, s.step->action_input, registry_);
            if (other.ok() && other.invocation->tool_name == inv.tool_name &&
                other.invocation->video_ref == inv.video_ref &&
                other.invocation->sub_question == inv.sub_question)
                return true;
            if (s.step->action == inv.tool_name &&
                trim(s.step->action_input) == trim(format_invocation_input(inv)))
                return true;
        }
        return false;
    }

    void dispatch(int node_id) {
        TreeNode& n = tree_.node(node_id);
        InvocationResult inv = parse_invocation(n.step->action, n.step->action_input, registry_);
        ToolContext ctx{memory_, &backend_};
        n.step->observation = sanitize_observation(registry_.invoke(*inv.invocation, ctx));
    }

    // Phase 3. Runs the chain below the freshly expanded node to a final
    // answer, an unrecoverable parse error, or the depth cap.
    int execute_chain(int start, int iteration) {
        int ancestor_end = *tree_.node(start).parent;
        std::string ancestor_history = tree_.transcript(ancestor_end);
        dispatch(start);
        int current = start;
        while (true) {
            if (tree_.node(current).depth >= config_.limits.max_depth) {
                tree_.node(current).outcome = NodeOutcome::failure;
                return current;
            }
            std::string scratchpad = chain_scratchpad(start, current);
            std::vector<ChatTurn> turns{{"user", render(ancestor_history, "", scratchpad)}};
            ParsedCompletion last_parsed;
            std::string last_raw, last_reason = "no completion";
            bool stepped = false;
            for (int attempt = 0; attempt <= config_.limits.parse_retries; ++attempt) {
                ChatResponse resp = complete_with(turns);
                last_raw = resp.text;
                last_parsed = parse_completion(resp.text);
                if (last_parsed.is_final()) return add_final_leaf(current, last_parsed);
                std::string problem;
                if (last_parsed.is_error()) {
                    problem = last_parsed.error;
                } else {
                    InvocationResult inv =
                        parse_invocation(last_parsed.action, last_parsed.action_input, registry_);
                    if (!inv.ok()) {
                        problem = inv.error;
                    } else {
                        TreeNode proto;
                        proto.step = ReactStep{last_parsed.thought, last_parsed.action,
                                               last_parsed.action_input, ""};
                        current = tree_.add_child(current, proto);
                        dispatch(current);
                        stepped = true;
                        break;
                    }
                }
                last_reason = problem;
                turns.push_back({"assistant", resp.text});
                turns.push_back({"user", "Your reply was not usable: " + problem +
                                             "\nContinue from the same state and follow the "
                                             "format exactly."});
            }
            if (!stepped)
                return add_failure_leaf(current, failure_step(current, last_parsed, last_raw,
                                                              "PARSE_FAILED: " + last_reason,
                                                              iteration));
        }
    }

    std::string chain_scratchpad(int start, int current) const {
        std::string out;
        std::vector<int> path = tree_.path_from_root(current);
        bool in_chain = false;
        for (int id : path) {
            if (id == start) in_chain = true;
            if (!in_chain) continue;
            const TreeNode& n = tree_.node(id);
            if (n.step) out += format_step(*n.step);
        }
        return out;
    }

    nlohmann::json build_trace(const SessionResult& result) const {
        nlohmann::json trace;
        trace["config"] = {{"N", config_.reward.iterations},
                           {"alpha", config_.reward.alpha},
                           {"beta", config_.reward.beta},
                           {"policy", selection_policy_name(config_.policy)},
                           {"seed", config_.seed}};
        trace["question"] = question_;
        trace["video_ref"] = video_ref_;
        nlohmann::json nodes = nlohmann::json::array();
        for (const auto& n : result.tree.nodes()) {
            nlohmann::json jn;
            jn["id"] = n.id;
            if (n.parent) jn["parent"] = *n.parent;
            else jn["parent"] = nullptr;
            jn["depth"] = n.depth;
            jn["children"] = n.children;
            jn["outcome"] = node_outcome_name(n.outcome);
            jn["R"] = n.reward;
            nlohmann::json hist = nlohmann::json::array();
            for (const auto& [it, delta] : n.reward_history) hist.push_back({it, delta});
            jn["reward_history"] = hist;
            if (n.step) {
                jn["step"] = {{"thought", n.step->thought},
                              {"action", n.step->action},
                              {"action_input", n.step->action_input},
                              {"observation", n.step->observation}};
            }
            if (n.final_answer) {
                jn["final_answer"] = *n.final_answer;
                jn["final_thought"] = n.final_thought;
            }
            nodes.push_back(std::move(jn));
        }
        trace["nodes"] = std::move(nodes);
        nlohmann::json answers = nlohmann::json::array();
        for (const auto& a : result.answers) {
            answers.push_back({{"text", a.text},
                               {"leaf_id", a.leaf_id},
                               {"iteration", a.iteration},
                               {"path_reward", a.path_reward},
                               {"path", a.path}});
        }
        trace["answers"] = std::move(answers);
        nlohmann::json selections = nlohmann::json::array();
        for (const auto& [it, id] : result.selections) selections.push_back({it, id});
        trace["selections"] = std::move(selections);
        return trace;
    }

    PlannerTree tree_;
    std::string question_;
    std::string video_ref_;
    const TaskMemory* memory_;
    const ToolRegistry& registry_;
    ChatBackend& backend_;
    PlannerConfig config_;
    SeededRng rng_;
};

} // namespace detail

// Runs N iterations of select → expand → execute → back-propagate and
// returns every nonfailure answer in iteration order plus the full tree
// and its serialized trace. Deterministic given (inputs, scripts, seed).
inline SessionResult run_planner(const std::string& question, const std::string& video_ref,
                                 const TaskMemory* memory, const ToolRegistry& registry,
                                 ChatBackend& backend, const PlannerConfig& config) {
    detail::PlannerSession session(question, video_ref, memory, registry, backend, config);
    return session.run();
}

} // namespace treeact

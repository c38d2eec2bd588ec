#pragma once

#include <cctype>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "treeact/backend.hpp"
#include "treeact/common.hpp"
#include "treeact/planner.hpp"
#include "treeact/react.hpp"

namespace treeact {

struct NoAnswers : std::runtime_error {
    NoAnswers() : std::runtime_error("no candidate answers to aggregate") {}
};

// Maps an answer to a choice index: first a standalone choice letter
// (A, B, ... by position), then a choice-text substring match, longest
// match winning and ties going to the lowest index. Single-character
// choice texts only match as standalone letters. No match → abstain.
inline std::optional<size_t> map_answer_to_choice(const std::string& answer,
                                                  const std::vector<std::string>& choices) {
    auto is_word = [](unsigned char c) { return std::isalnum(c) != 0; };
    for (size_t i = 0; i < answer.size(); ++i) {
        unsigned char c = static_cast<unsigned char>(answer[i]);
        if (!std::isalpha(c)) continue;
        bool left_ok = i == 0 || !is_word(static_cast<unsigned char>(answer[i - 1]));
        bool right_ok = i + 1 == answer.size() || !is_word(static_cast<unsigned char>(answer[i + 1]));
        if (!left_ok || !right_ok) continue;
        size_t idx = static_cast<size_t>(std::toupper(c) - 'A');
        if (idx < choices.size()) return idx;
    }
    std::string lower_answer = to_lower(answer);
    std::optional<size_t> best;
    size_t best_len = 0;
    for (size_t i = 0; i < choices.size(); ++i) {
        std::string needle = to_lower(trim(choices[i]));
        if (needle.size() < 2) continue;
        if (lower_answer.find(needle) == std::string::npos) continue;
        if (needle.size() > best_len) {
            best = i;
            best_len = needle.size();
        }
    }
    return best;
}

// Majority label over the mapped answers; ties broken by highest summed
// path_reward, then earliest iteration. nullopt when every answer abstains
// (callers fall back to summarize).
inline std::optional<std::string> vote(const std::vector<Answer>& answers,
                                       const std::vector<std::string>& choices) {
    if (choices.empty()) throw std::invalid_argument("vote requires a non-empty choice list");
    struct Tally {
        int votes = 0;
        double reward_sum = 0.0;
        int first_iteration = 0;
    };
    std::map<size_t, Tally> tallies;
    for (const auto& a : answers) {
        auto idx = map_answer_to_choice(a.text, choices);
        if (!idx) continue;
        Tally& t = tallies[*idx];
        if (t.votes == 0 || a.iteration < t.first_iteration) t.first_iteration = a.iteration;
        ++t.votes;
        t.reward_sum += a.path_reward;
    }
    if (tallies.empty()) return std::nullopt;
    std::optional<size_t> best;
    for (const auto& [idx, t] : tallies) {
        if (!best) {
            best = idx;
            continue;
        }
        const Tally& b = tallies[*best];
        if (t.votes != b.votes) {
            if (t.votes > b.votes) best = idx;
        } else if (t.reward_sum != b.reward_sum) {
            if (t.reward_sum > b.reward_sum) best = idx;
        } else if (t.first_iteration < b.first_iteration) {
            best = idx;
        }
    }
    return choices[*best];
}

inline size_t path_step_count(const Answer& answer) {
    size_t count = 0;
    for (const auto& line : split_lines(answer.path)) {
        std::string t = trim(line);
        if (starts_with(t, kActionMarker) && !starts_with(t, kActionInputMarker)) ++count;
    }
    return count;
}

// One completion over a fixed prompt listing every candidate with its path
// length; a single answer is returned unchanged without a backend call.
inline std::string summarize(const std::vector<Answer>& answers, const std::string& question,
                             ChatBackend& backend) {
    if (answers.empty()) throw NoAnswers{};
    if (answers.size() == 1) return answers.front().text;
    ChatRequest req;
    req.system_prompt =
        "Several independent attempts answered the same question. Summarize them into one "
        "informative final answer.";
    std::string user = "Question: " + question + "\nCandidate answers:\n";
    for (size_t i = 0; i < answers.size(); ++i) {
        user += std::to_string(i + 1) + ". (path length " +
                std::to_string(path_step_count(answers[i])) + ") " + answers[i].text + "\n";
    }
    req.turns.push_back({"user", user});
    return backend.complete(req).text;
}

} // namespace treeact

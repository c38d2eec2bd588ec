#pragma once

#include <optional>
#include <string>
#include <vector>

#include "treeact/common.hpp"

namespace treeact {

// One ⟨thought, action, action input, observation⟩ reasoning step.
struct ReactStep {
    std::string thought;
    std::string action;
    std::string action_input;
    std::string observation;

    bool operator==(const ReactStep&) const = default;
};

// Line markers. "Action Input:" must be tested before "Action:".
inline constexpr const char* kThoughtMarker = "Thought:";
inline constexpr const char* kActionMarker = "Action:";
inline constexpr const char* kActionInputMarker = "Action Input:";
inline constexpr const char* kObservationMarker = "Observation:";
inline constexpr const char* kFinalAnswerMarker = "Final Answer:";

struct ParsedCompletion {
    enum class Kind { step, final_answer, error };
    Kind kind = Kind::error;
    std::string thought;
    std::string action;       // step only
    std::string action_input; // step only
    std::string answer;       // final_answer only
    std::string error;        // error only

    bool is_step() const { return kind == Kind::step; }
    bool is_final() const { return kind == Kind::final_answer; }
    bool is_error() const { return kind == Kind::error; }
};

namespace detail {

inline bool take_marker(const std::string& line, const char* marker, std::string& rest) {
    std::string t = trim(line);
    if (!starts_with(t, marker)) return false;
    rest = trim(t.substr(std::string(marker).size()));
    return true;
}

enum class Field { none, thought, action, action_input, observation, final_answer };

} // namespace detail

// Parses a model completion into either a next step (thought/action/action
// input) or a final answer. The first of Action / Final Answer decides the
// interpretation; continuation lines fold into the preceding field joined
// with a single space. Anything else is a recoverable parse error.
inline ParsedCompletion parse_completion(const std::string& text) {
    using detail::Field;
    ParsedCompletion out;
    Field current = Field::none;
    std::string thought, action, action_input, answer;
    bool saw_action = false, saw_input = false, saw_final = false;

    auto append = [](std::string& field, const std::string& piece) {
        if (piece.empty()) return;
        if (!field.empty()) field += ' ';
        field += piece;
    };

    for (const auto& raw : split_lines(text)) {
        std::string rest;
        if (detail::take_marker(raw, kActionInputMarker, rest)) {
            if (saw_final) break;
            saw_input = true;
            current = Field::action_input;
            append(action_input, rest);
        } else if (detail::take_marker(raw, kFinalAnswerMarker, rest)) {
            if (saw_action) break; // step already decided; trailing babble ignored
            saw_final = true;
            current = Field::final_answer;
            append(answer, rest);
        } else if (detail::take_marker(raw, kActionMarker, rest)) {
            if (saw_final) break;
            saw_action = true;
            current = Field::action;
            append(action, rest);
        } else if (detail::take_marker(raw, kThoughtMarker, rest)) {
            if (saw_action || saw_final) break;
            current = Field::thought;
            append(thought, rest);
        } else if (detail::take_marker(raw, kObservationMarker, rest)) {
            break; // runtime-owned marker; model output beyond it is discarded
        } else {
            std::string t = trim(raw);
            if (t.empty() || current == Field::none) continue;
            switch (current) {
                case Field::thought: append(thought, t); break;
                case Field::action: append(action, t); break;
                case Field::action_input: append(action_input, t); break;
                case Field::final_answer: append(answer, t); break;
                default: break;
            }
        }
    }

    if (saw_final) {
        out.kind = ParsedCompletion::Kind::final_answer;
        out.thought = thought;
        out.answer = answer;
        return out;
    }
    if (saw_action && saw_input) {
        if (trim(action).empty()) {
            out.error = "empty Action";
            return out;
        }
        out.kind = ParsedCompletion::Kind::step;
        out.thought = thought;
        out.action = action;
        out.action_input = action_input;
        return out;
    }
    if (saw_action) out.error = "missing 'Action Input:' line";
    else out.error = "completion has neither an Action nor a Final Answer";
    return out;
}

// Observations may be multi-line tool output; a line that itself begins
// with a grammar marker would corrupt the transcript, so such lines get a
// "| " guard prefix before being embedded.
inline std::string sanitize_observation(const std::string& text) {
    std::string out;
    auto lines = split_lines(text);
    for (size_t i = 0; i < lines.size(); ++i) {
        std::string t = trim(lines[i]);
        bool markerish = starts_with(t, kActionInputMarker) || starts_with(t, kFinalAnswerMarker) ||
                         starts_with(t, kActionMarker) || starts_with(t, kThoughtMarker) ||
                         starts_with(t, kObservationMarker);
        if (i) out += '\n';
        if (markerish) out += "| ";
        out += lines[i];
    }
    return out;
}

// Exact scratchpad block for one completed step, Observation included.
inline std::string format_step(const ReactStep& step) {
    return std::string(kThoughtMarker) + " " + step.thought + "\n" + kActionMarker + " " +
           step.action + "\n" + kActionInputMarker + " " + step.action_input + "\n" +
           kObservationMarker + " " + step.observation + "\n";
}

// Block for a step awaiting its observation (completion echo in prompts).
inline std::string format_step_pending(const ReactStep& step) {
    return std::string(kThoughtMarker) + " " + step.thought + "\n" + kActionMarker + " " +
           step.action + "\n" + kActionInputMarker + " " + step.action_input + "\n";
}

inline std::string format_final(const std::string& thought, const std::string& answer) {
    std::string out;
    if (!thought.empty()) out += std::string(kThoughtMarker) + " " + thought + "\n";
    out += std::string(kFinalAnswerMarker) + " " + answer + "\n";
    return out;
}

// A transcript is valid when its marker lines spell
//   (Thought Action ActionInput Observation)*  [Thought] [FinalAnswer]
// with at most one Final Answer. Unmarked lines are continuations.
inline bool validate_transcript(const std::string& text) {
    using detail::Field;
    std::vector<Field> seq;
    for (const auto& raw : split_lines(text)) {
        std::string rest;
        if (detail::take_marker(raw, kActionInputMarker, rest)) seq.push_back(Field::action_input);
        else if (detail::take_marker(raw, kFinalAnswerMarker, rest)) seq.push_back(Field::final_answer);
        else if (detail::take_marker(raw, kActionMarker, rest)) seq.push_back(Field::action);
        else if (detail::take_marker(raw, kThoughtMarker, rest)) seq.push_back(Field::thought);
        else if (detail::take_marker(raw, kObservationMarker, rest)) seq.push_back(Field::observation);
    }
    size_t i = 0;
    auto at = [&](Field f) { return i < seq.size() && seq[i] == f; };
    while (at(Field::thought)) {
        ++i;
        if (at(Field::final_answer)) {
            ++i;
            return i == seq.size();
        }
        if (!at(Field::action)) return false;
        ++i;
        if (!at(Field::action_input)) return false;
        ++i;
        if (!at(Field::observation)) return false;
        ++i;
    }
    if (at(Field::final_answer)) {
        ++i;
        return i == seq.size();
    }
    return i == seq.size();
}

} // namespace treeact

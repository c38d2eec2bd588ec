#pragma once

#include <cctype>
#include <map>
#include <stdexcept>
#include <string>

namespace treeact {

struct MissingPlaceholder : std::runtime_error {
    explicit MissingPlaceholder(const std::string& name)
        : std::runtime_error("missing placeholder: {" + name + "}"), placeholder(name) {}
    std::string placeholder;
};

// Single-pass `{name}` substitution. Replaced text is never rescanned, so
// values may themselves contain braces. A `{name}` with no supplied value
// throws; a lone `{` not opening a well-formed placeholder passes through.
inline std::string render_template(const std::string& tmpl,
                                   const std::map<std::string, std::string>& values) {
    std::string out;
    out.reserve(tmpl.size());
    size_t i = 0;
    while (i < tmpl.size()) {
        char c = tmpl[i];
        if (c != '{') {
            out += c;
            ++i;
            continue;
        }
        size_t j = i + 1;
        while (j < tmpl.size() && (std::isalnum(static_cast<unsigned char>(tmpl[j])) || tmpl[j] == '_'))
            ++j;
        if (j >= tmpl.size() || tmpl[j] != '}' || j == i + 1) {
            out += c;
            ++i;
            continue;
        }
        std::string name = tmpl.substr(i + 1, j - i - 1);
        auto it = values.find(name);
        if (it == values.end()) throw MissingPlaceholder(name);
        out += it->second;
        i = j + 1;
    }
    return out;
}

// The planner's main prompt. Placeholders, each used exactly once:
//   video_filename     path of the video under discussion
//   tool_descriptions  registry description block
//   tool_names         comma-separated registered tool names
//   input_question     the question being answered
//   ancestor_history   formatted steps of the selected node's path
//   expansion_prompt   sibling-avoidance block; empty during chain execution
//   agent_scratchpad   steps accumulated in the current chain
inline const std::string& planner_prompt_template() {
    static const std::string tmpl =
        "You are working on a question about the video file {video_filename}.\n"
        "Answer the following question as best you can. You have access to the following tools:\n"
        "\n"
        "{tool_descriptions}\n"
        "\n"
        "Use the following format:\n"
        "\n"
        "Question: the input question you must answer\n"
        "Thought: you should always think about what to do\n"
        "Action: the action to take, must be one of [{tool_names}]\n"
        "Action Input: the input to the action\n"
        "Observation: the result of the action\n"
        "... (this Thought/Action/Action Input/Observation can repeat several times)\n"
        "Thought: I now know the final answer\n"
        "Final Answer: the final answer to the original input question\n"
        "\n"
        "Begin!\n"
        "\n"
        "Question: {input_question}\n"
        "{ancestor_history}{expansion_prompt}{agent_scratchpad}";
    return tmpl;
}

struct PlannerPromptContext {
    std::string video_filename;
    std::string input_question;
    std::string tool_names;
    std::string tool_descriptions;
    std::string agent_scratchpad;
    std::string ancestor_history;
    std::string expansion_prompt; // empty during chain execution

    std::map<std::string, std::string> to_values() const {
        return {{"video_filename", video_filename},
                {"input_question", input_question},
                {"tool_names", tool_names},
                {"tool_descriptions", tool_descriptions},
                {"agent_scratchpad", agent_scratchpad},
                {"ancestor_history", ancestor_history},
                {"expansion_prompt", expansion_prompt}};
    }
};

inline std::string render_planner_prompt(const PlannerPromptContext& ctx) {
    return render_template(planner_prompt_template(), ctx.to_values());
}

} // namespace treeact

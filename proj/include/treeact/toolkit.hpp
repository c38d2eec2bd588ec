#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "treeact/backend.hpp"
#include "treeact/common.hpp"
#include "treeact/memory.hpp"

namespace treeact {

enum class ToolKind { subtask, knowledge, utility };

struct ToolSpec {
    std::string name; // unique, no whitespace
    std::string description;
    ToolKind kind = ToolKind::subtask;
};

struct ToolInvocation {
    std::string tool_name;
    std::string video_ref;
    std::string sub_question;

    bool operator==(const ToolInvocation&) const = default;
};

inline std::string format_invocation_input(const ToolInvocation& inv) {
    return inv.video_ref + "#" + inv.sub_question;
}

struct ToolContext {
    const TaskMemory* memory = nullptr;
    ChatBackend* backend = nullptr;
};

using ToolHandler = std::function<std::string(const ToolInvocation&, const ToolContext&)>;

// Immutable after construction; registration order is the description order.
class ToolRegistry {
public:
    void add(ToolSpec spec, ToolHandler handler) {
        if (spec.name.empty() || spec.name.find_first_of(" \t\n") != std::string::npos)
            throw std::invalid_argument("tool name must be non-empty without whitespace");
        if (spec.description.empty())
            throw std::invalid_argument("tool description must be non-empty: " + spec.name);
        if (find(spec.name)) throw std::invalid_argument("duplicate tool name: " + spec.name);
        handlers_[spec.name] = std::move(handler);
        specs_.push_back(std::move(spec));
    }

    const ToolSpec* find(const std::string& name) const {
        for (const auto& s : specs_)
            if (s.name == name) return &s;
        return nullptr;
    }

    const std::vector<ToolSpec>& specs() const { return specs_; }
    size_t size() const { return specs_.size(); }
    bool empty() const { return specs_.empty(); }

    std::string names_csv() const {
        std::string out;
        for (const auto& s : specs_) {
            if (!out.empty()) out += ", ";
            out += s.name;
        }
        return out;
    }

    std::string invoke(const ToolInvocation& inv, const ToolContext& ctx) const {
        auto it = handlers_.find(inv.tool_name);
        if (it == handlers_.end()) throw std::logic_error("unregistered tool: " + inv.tool_name);
        return it->second(inv, ctx);
    }

private:
    std::vector<ToolSpec> specs_;
    std::map<std::string, ToolHandler> handlers_;
};

// "name: description" per tool, registration order. Deterministic.
inline std::string registry_descriptions(const ToolRegistry& registry) {
    if (registry.empty()) {
        std::cerr << "warning: tool registry is empty\n";
        return "";
    }
    std::string out;
    for (const auto& s : registry.specs()) {
        if (!out.empty()) out += '\n';
        out += s.name + ": " + s.description;
    }
    return out;
}

// ── Command grammar ─────────────────────────────────────────────────────

struct InvocationResult {
    std::optional<ToolInvocation> invocation;
    std::string error;

    bool ok() const { return invocation.has_value(); }
};

// `action_line` is the text after `Action:`, `input_line` after
// `Action Input:`. Input splits at the FIRST '#'. Unknown tools and a
// missing separator are recoverable failures the planner feeds back.
inline InvocationResult parse_invocation(const std::string& action_line,
                                         const std::string& input_line,
                                         const ToolRegistry& registry) {
    InvocationResult out;
    std::string name = trim(action_line);
    if (!name.empty() && name.back() == '.') name = trim(name.substr(0, name.size() - 1));
    const ToolSpec* spec = registry.find(name); // case-sensitive
    if (!spec) {
        out.error = "unknown tool: '" + name + "'. Available tools: " + registry.names_csv();
        return out;
    }
    std::string input = trim(input_line);
    size_t hash = input.find('#');
    if (hash == std::string::npos) {
        if (spec->kind == ToolKind::utility) {
            out.invocation = ToolInvocation{name, input, ""};
            return out;
        }
        out.error = "missing '#' separator: expected <video_ref>#<sub_question>";
        return out;
    }
    ToolInvocation inv{name, trim(input.substr(0, hash)), trim(input.substr(hash + 1))};
    if (inv.sub_question.empty() && spec->kind != ToolKind::utility) {
        out.error = "empty sub-question after '#'";
        return out;
    }
    out.invocation = std::move(inv);
    return out;
}

// ── SQL sub-agent ───────────────────────────────────────────────────────

// Pulls the SQL out of a completion: fenced block if present, else the text
// after a leading "SQL:" marker, else the whole trimmed completion.
inline std::string extract_sql(const std::string& completion) {
    std::string text = trim(completion);
    size_t fence = text.find("```");
    if (fence != std::string::npos) {
        size_t start = fence + 3;
        size_t end = text.find("```", start);
        std::string body = text.substr(start, end == std::string::npos ? std::string::npos : end - start);
        size_t nl = body.find('\n');
        if (nl != std::string::npos) {
            std::string tag = to_lower(trim(body.substr(0, nl)));
            if (tag == "sql" || tag == "sqlite") body = body.substr(nl + 1);
        }
        return trim(body);
    }
    size_t marker = text.find("SQL:");
    if (marker != std::string::npos) return trim(text.substr(marker + 4));
    return text;
}

struct SqlSubagentOptions {
    int max_sql_attempts = 3; // error-budget cap for the inner loop
    size_t max_result_rows = 25;
};

// Inner loop: model writes SQL, the store executes it read-only, errors are
// fed back, and a successful result is handed back for a final
// natural-language answer. Always terminates within the attempt cap.
inline std::string run_sql_subagent(const SqlStore& store, const std::string& examples,
                                    const std::string& sub_question, ChatBackend& backend,
                                    const SqlSubagentOptions& options = {}) {
    ChatRequest req;
    req.system_prompt =
        "You answer questions about a video by querying its symbolic memory with SQLite SQL. "
        "Reply with exactly one read-only SELECT statement.\n\n" +
        examples + "\nThe store schema:\n" + store.describe_schema();
    req.turns.push_back({"user", "Sub-question: " + sub_question +
                                     "\nReply with one SQL SELECT statement."});
    for (int attempt = 1; attempt <= options.max_sql_attempts; ++attempt) {
        ChatResponse resp = backend.complete(req);
        std::string sql = extract_sql(resp.text);
        SqlOutcome out = store.execute(sql);
        req.turns.push_back({"assistant", resp.text});
        if (!out.ok()) {
            req.turns.push_back({"user", "The query failed: " + out.error->describe() +
                                             "\nProvide a corrected SQL SELECT statement."});
            continue;
        }
        req.turns.push_back({"user", "SQL result:\n" + out.table->to_text(options.max_result_rows) +
                                         "Answer the sub-question in one short sentence."});
        ChatResponse answer = backend.complete(req);
        return trim(answer.text);
    }
    return "SUBTASK_FAILED: sql_error_budget_exhausted";
}

// ── Sub-task tools ──────────────────────────────────────────────────────

enum class SubtaskKind { when, why, what, how, count, other };

inline constexpr std::array<SubtaskKind, 6> kSubtaskKinds = {
    SubtaskKind::when, SubtaskKind::why, SubtaskKind::what,
    SubtaskKind::how,  SubtaskKind::count, SubtaskKind::other};

inline const char* subtask_kind_name(SubtaskKind kind) {
    switch (kind) {
        case SubtaskKind::when: return "when";
        case SubtaskKind::why: return "why";
        case SubtaskKind::what: return "what";
        case SubtaskKind::how: return "how";
        case SubtaskKind::count: return "count";
        case SubtaskKind::other: return "other";
    }
    return "?";
}

inline std::string subtask_tool_name(SubtaskKind kind) {
    switch (kind) {
        case SubtaskKind::when: return "VideoWhen";
        case SubtaskKind::why: return "VideoWhy";
        case SubtaskKind::what: return "VideoWhat";
        case SubtaskKind::how: return "VideoHow";
        case SubtaskKind::count: return "VideoCount";
        case SubtaskKind::other: return "VideoOther";
    }
    return "?";
}

inline std::string subtask_tool_description(SubtaskKind kind) {
    switch (kind) {
        case SubtaskKind::when:
            return "Useful when you need to locate when something happens in the video. "
                   "The inputs are the video path and the sub-question joined by '#'. "
                   "For example: inputs is ./videos/xxx.mp4#When does the dog walk past the sofa?";
        case SubtaskKind::why:
            return "Useful when you need to explain why something happens in the video. "
                   "The inputs are the video path and the sub-question joined by '#'. "
                   "For example: inputs is ./videos/xxx.mp4#Why did the lady shake the toy?";
        case SubtaskKind::what:
            return "Useful when you need to describe what is in the video or what happens. "
                   "The inputs are the video path and the sub-question joined by '#'. "
                   "For example: inputs is ./videos/xxx.mp4#What's in the video?";
        case SubtaskKind::how:
            return "Useful when you need to describe how something is done in the video. "
                   "The inputs are the video path and the sub-question joined by '#'. "
                   "For example: inputs is ./videos/xxx.mp4#How does the man open the box?";
        case SubtaskKind::count:
            return "Useful when you need to count objects, people, or events in the video. "
                   "The inputs are the video path and the sub-question joined by '#'. "
                   "For example: inputs is ./videos/xxx.mp4#How many people are in the video?";
        case SubtaskKind::other:
            return "Useful for any other sub-question about the video content, including "
                   "speech and on-screen text. The inputs are the video path and the "
                   "sub-question joined by '#'. "
                   "For example: inputs is ./videos/xxx.mp4#What does the sign say?";
    }
    return "?";
}

// Each kind ships distinct in-context examples; files under a data dir
// override the built-ins.
inline std::string builtin_subtask_examples(SubtaskKind kind) {
    switch (kind) {
        case SubtaskKind::when:
            return "Sub-question: When does the dog walk past the sofa?\n"
                   "SQL: SELECT MIN(timestamp) FROM frames WHERE caption LIKE '%dog%sofa%'\n"
                   "\n"
                   "Sub-question: When is the door opened?\n"
                   "SQL: SELECT start_frame, end_frame FROM clips WHERE caption LIKE '%door%' "
                   "ORDER BY start_frame LIMIT 1\n";
        case SubtaskKind::why:
            return "Sub-question: Why did the lady shake the toy?\n"
                   "SQL: SELECT caption FROM clips ORDER BY start_frame\n"
                   "\n"
                   "Sub-question: Why is the baby crying?\n"
                   "SQL: SELECT frame_index, caption, asr_text FROM frames "
                   "WHERE caption IS NOT NULL OR asr_text IS NOT NULL ORDER BY frame_index\n";
        case SubtaskKind::what:
            return "Sub-question: What's in the video?\n"
                   "SQL: SELECT category, appearance, action FROM instances\n"
                   "\n"
                   "Sub-question: What happens after the man stands up?\n"
                   "SQL: SELECT caption FROM clips ORDER BY start_frame\n";
        case SubtaskKind::how:
            return "Sub-question: How does the man open the box?\n"
                   "SQL: SELECT category, action FROM instances WHERE category='man' OR category='person'\n"
                   "\n"
                   "Sub-question: How do the players move around the field?\n"
                   "SQL: SELECT instance_id, frame_index, x1, y1, x2, y2 FROM trajectories "
                   "ORDER BY instance_id, frame_index\n";
        case SubtaskKind::count:
            return "Sub-question: How many people are in the video?\n"
                   "SQL: SELECT COUNT(*) FROM instances WHERE category='person'\n"
                   "\n"
                   "Sub-question: How many scene changes are there?\n"
                   "SQL: SELECT COUNT(*) FROM clips\n";
        case SubtaskKind::other:
            return "Sub-question: What does the sign say?\n"
                   "SQL: SELECT ocr_text FROM frames WHERE ocr_text IS NOT NULL ORDER BY frame_index\n"
                   "\n"
                   "Sub-question: What is said in the video?\n"
                   "SQL: SELECT asr_text FROM frames WHERE asr_text IS NOT NULL ORDER BY frame_index\n";
    }
    return "";
}

// Loads `<dir>/<kind>.txt`, falling back to the built-in block.
inline std::string load_subtask_examples(SubtaskKind kind, const std::string& examples_dir) {
    if (!examples_dir.empty()) {
        std::filesystem::path p =
            std::filesystem::path(examples_dir) / (std::string(subtask_kind_name(kind)) + ".txt");
        std::ifstream in(p);
        if (in) {
            std::ostringstream os;
            os << in.rdbuf();
            if (!trim(os.str()).empty()) return os.str();
        }
    }
    return builtin_subtask_examples(kind);
}

inline std::string run_subtask_tool(SubtaskKind kind, const TaskMemory& memory,
                                    const std::string& sub_question, ChatBackend& backend,
                                    const std::string& examples_dir = "",
                                    const SqlSubagentOptions& options = {}) {
    return run_sql_subagent(memory.store(), load_subtask_examples(kind, examples_dir), sub_question,
                            backend, options);
}

inline void register_subtask_tools(ToolRegistry& registry, const std::string& examples_dir = "",
                                   const SqlSubagentOptions& options = {}) {
    for (SubtaskKind kind : kSubtaskKinds) {
        std::string examples = load_subtask_examples(kind, examples_dir);
        registry.add(
            ToolSpec{subtask_tool_name(kind), subtask_tool_description(kind), ToolKind::subtask},
            [examples, options](const ToolInvocation& inv, const ToolContext& ctx) -> std::string {
                if (!ctx.memory) return "SUBTASK_FAILED: no_memory";
                if (!ctx.backend) return "SUBTASK_FAILED: no_backend";
                return run_sql_subagent(ctx.memory->store(), examples, inv.sub_question,
                                        *ctx.backend, options);
            });
    }
}

} // namespace treeact

#pragma once

#include <sys/wait.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "treeact/prompt.hpp"
#include "treeact/toolkit.hpp"

namespace treeact {

enum class KnowledgeKind { symbolic, textual, web };

struct KnowledgeSource {
    KnowledgeKind kind = KnowledgeKind::textual;
    std::string locator; // store file | document path | search URL template with {query}
    std::string description;
};

// ── Embeddings and retrieval ────────────────────────────────────────────

using EmbeddingFn = std::function<std::vector<double>(const std::string&)>;

inline double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0, na = 0, nb = 0;
    size_t n = std::min(a.size(), b.size());
    for (size_t i = 0; i < n; ++i) dot += a[i] * b[i];
    for (double v : a) na += v * v;
    for (double v : b) nb += v * v;
    if (na == 0 || nb == 0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Hashed token-frequency vector. Offline stand-in for a real embedding
// provider; deterministic across platforms.
inline std::vector<double> test_embedding(const std::string& text, size_t dim = 64) {
    std::vector<double> v(dim, 0.0);
    for (const auto& tok : tokenize(text)) v[fnv1a64(tok) % dim] += 1.0;
    return v;
}

inline constexpr size_t kChunkTokens = 256;
inline constexpr size_t kRetrievalTopK = 4;

// Fixed-size token chunks, whitespace tokenization, original casing kept.
inline std::vector<std::string> chunk_text(const std::string& text, size_t chunk_tokens = kChunkTokens) {
    std::vector<std::string> chunks;
    std::istringstream is(text);
    std::string tok, current;
    size_t count = 0;
    while (is >> tok) {
        if (!current.empty()) current += ' ';
        current += tok;
        if (++count == chunk_tokens) {
            chunks.push_back(std::move(current));
            current.clear();
            count = 0;
        }
    }
    if (!current.empty()) chunks.push_back(std::move(current));
    return chunks;
}

struct ScoredChunk {
    size_t index = 0;
    double score = 0.0;
};

// Top-k by cosine; ties broken by ascending chunk index.
inline std::vector<ScoredChunk> retrieve_chunks(const std::vector<std::string>& chunks,
                                                const std::string& question, const EmbeddingFn& embed,
                                                size_t top_k = kRetrievalTopK) {
    std::vector<double> q = embed(question);
    std::vector<ScoredChunk> scored;
    scored.reserve(chunks.size());
    for (size_t i = 0; i < chunks.size(); ++i)
        scored.push_back({i, cosine_similarity(embed(chunks[i]), q)});
    std::stable_sort(scored.begin(), scored.end(), [](const ScoredChunk& a, const ScoredChunk& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.index < b.index;
    });
    if (scored.size() > top_k) scored.resize(top_k);
    return scored;
}

// ── Web search plumbing ─────────────────────────────────────────────────

using WebFetchFn = std::function<std::string(const std::string& url)>; // throws on transport failure

inline std::string url_encode(const std::string& s) {
    static const char* hex = "0123456789ABCDEF";
    std::string out;
    for (unsigned char c : s) {
        if (std::isalnum(c) || c == '-' || c == '_' || c == '.' || c == '~') out += static_cast<char>(c);
        else {
            out += '%';
            out += hex[c >> 4];
            out += hex[c & 15];
        }
    }
    return out;
}

inline std::string default_web_fetch(const std::string& url) {
    auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw std::runtime_error("malformed url: " + url);
    auto host_start = scheme_end + 3;
    auto path_start = url.find('/', host_start);
    std::string origin = path_start == std::string::npos ? url : url.substr(0, path_start);
    std::string path = path_start == std::string::npos ? "/" : url.substr(path_start);
    httplib::Client client(origin);
    client.set_connection_timeout(10);
    client.set_read_timeout(30);
    auto res = client.Get(path);
    if (!res) throw std::runtime_error("fetch failed: " + httplib::to_string(res.error()));
    if (res->status < 200 || res->status >= 300)
        throw std::runtime_error("fetch failed: HTTP " + std::to_string(res->status));
    return res->body;
}

struct SearchResult {
    std::string title;
    std::string snippet;
};

// Accepts a top-level array or {"results": [...]}; items carry
// title/snippet (snippet may be named "text").
inline std::vector<SearchResult> parse_search_results(const std::string& body) {
    std::vector<SearchResult> results;
    nlohmann::json j = nlohmann::json::parse(body, nullptr, false);
    if (j.is_discarded()) return results;
    const nlohmann::json* list = nullptr;
    if (j.is_array()) list = &j;
    else if (j.is_object() && j.contains("results") && j["results"].is_array()) list = &j["results"];
    if (!list) return results;
    for (const auto& item : *list) {
        if (!item.is_object()) continue;
        SearchResult r;
        r.title = item.value("title", "");
        r.snippet = item.contains("snippet") ? item.value("snippet", "") : item.value("text", "");
        results.push_back(std::move(r));
    }
    return results;
}

// ── Knowledge tool execution ────────────────────────────────────────────

inline std::string builtin_symbolic_examples() {
    return "Sub-question: How many rows does the table contain?\n"
           "SQL: SELECT COUNT(*) FROM <table>\n";
}

// Dispatch per source kind. Failures surface as observations, not throws.
inline std::string run_knowledge_tool(const KnowledgeSource& source, const std::string& question,
                                      ChatBackend& backend, const EmbeddingFn& embed = {},
                                      const WebFetchFn& fetch = {},
                                      const SqlSubagentOptions& options = {}) {
    switch (source.kind) {
        case KnowledgeKind::symbolic: {
            try {
                SqlStore store(source.locator, /*writable=*/false);
                return run_sql_subagent(store, builtin_symbolic_examples(), question, backend, options);
            } catch (const std::runtime_error& e) {
                return std::string("KNOWLEDGE_FAILED: source_unavailable: ") + e.what();
            }
        }
        case KnowledgeKind::textual: {
            if (!embed) return "KNOWLEDGE_FAILED: embedding_backend_missing";
            std::ifstream in(source.locator);
            if (!in) return "KNOWLEDGE_FAILED: source_unavailable: " + source.locator;
            std::ostringstream os;
            os << in.rdbuf();
            auto chunks = chunk_text(os.str());
            if (chunks.empty()) return "no relevant passages found";
            auto top = retrieve_chunks(chunks, question, embed);
            ChatRequest req;
            req.system_prompt =
                "Answer the question using only the provided document excerpts. "
                "If they do not contain the answer, say so.";
            std::string user = "Excerpts:\n";
            for (size_t i = 0; i < top.size(); ++i)
                user += "[" + std::to_string(i + 1) + "] " + chunks[top[i].index] + "\n";
            user += "Question: " + question;
            req.turns.push_back({"user", user});
            return trim(backend.complete(req).text);
        }
        case KnowledgeKind::web: {
            std::string url = source.locator;
            auto pos = url.find("{query}");
            if (pos == std::string::npos) return "KNOWLEDGE_FAILED: source_unavailable: url template lacks {query}";
            url.replace(pos, 7, url_encode(question));
            std::string body;
            try {
                body = fetch ? fetch(url) : default_web_fetch(url);
            } catch (const std::exception& e) {
                return std::string("KNOWLEDGE_FAILED: source_unavailable: ") + e.what();
            }
            auto results = parse_search_results(body);
            if (results.empty()) return "no results found";
            ChatRequest req;
            req.system_prompt = "Summarize an answer to the question from the search results.";
            std::string user = "Search results:\n";
            for (const auto& r : results) user += "- " + r.title + ": " + r.snippet + "\n";
            user += "Question: " + question;
            req.turns.push_back({"user", user});
            return trim(backend.complete(req).text);
        }
    }
    return "KNOWLEDGE_FAILED: unknown source kind";
}

inline void register_knowledge_tool(ToolRegistry& registry, const std::string& name,
                                    KnowledgeSource source, EmbeddingFn embed = {},
                                    WebFetchFn fetch = {}, SqlSubagentOptions options = {}) {
    std::string description = source.description;
    if (description.empty()) description = "External knowledge source (" + source.locator + ").";
    description += " The inputs are a context reference and the question joined by '#'.";
    registry.add(ToolSpec{name, description, ToolKind::knowledge},
                 [source = std::move(source), embed = std::move(embed), fetch = std::move(fetch),
                  options](const ToolInvocation& inv, const ToolContext& ctx) -> std::string {
                     if (!ctx.backend) return "KNOWLEDGE_FAILED: no_backend";
                     return run_knowledge_tool(source, inv.sub_question, *ctx.backend, embed, fetch,
                                               options);
                 });
}

// ── Utility tools ───────────────────────────────────────────────────────

inline std::string shell_quote(const std::string& s) {
    std::string out = "'";
    for (char c : s) {
        if (c == '\'') out += "'\\''";
        else out += c;
    }
    out += "'";
    return out;
}

struct CommandResult {
    int status = -1;
    std::string output;
};

inline CommandResult run_command(const std::string& command) {
    CommandResult result;
    FILE* pipe = ::popen(command.c_str(), "r");
    if (!pipe) return result;
    char buf[4096];
    size_t n;
    while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) result.output.append(buf, n);
    int rc = ::pclose(pipe);
    result.status = WIFEXITED(rc) ? WEXITSTATUS(rc) : rc;
    return result;
}

// A utility tool shells out to an external command template with
// {video_ref}, {sub_question} and {input} placeholders (values quoted).
inline void register_utility_tool(ToolRegistry& registry, const std::string& name,
                                  const std::string& description,
                                  const std::string& command_template) {
    registry.add(ToolSpec{name, description, ToolKind::utility},
                 [command_template](const ToolInvocation& inv, const ToolContext&) -> std::string {
                     std::string cmd = render_template(
                         command_template, {{"video_ref", shell_quote(inv.video_ref)},
                                            {"sub_question", shell_quote(inv.sub_question)},
                                            {"input", shell_quote(format_invocation_input(inv))}});
                     CommandResult res = run_command(cmd);
                     if (res.status != 0)
                         return "UTILITY_FAILED(status " + std::to_string(res.status) + "): " +
                                trim(res.output);
                     return trim(res.output);
                 });
}

// ── Declarative registry config ─────────────────────────────────────────
//
// {
//   "subtask_examples_dir": "data/subtask_examples",   // optional
//   "register_subtask_tools": true,                    // default true
//   "tools": [
//     {"name": ..., "kind": "knowledge", "source_kind": "symbolic|textual|web",
//      "locator": ..., "description": ...},
//     {"name": ..., "kind": "utility", "command": ..., "description": ...}
//   ]
// }

inline void configure_registry(ToolRegistry& registry, const nlohmann::json& config,
                               EmbeddingFn embed = {}, WebFetchFn fetch = {},
                               SqlSubagentOptions options = {}) {
    if (!config.is_object()) throw std::invalid_argument("tool config must be a JSON object");
    std::string examples_dir = config.value("subtask_examples_dir", "");
    if (config.value("register_subtask_tools", true))
        register_subtask_tools(registry, examples_dir, options);
    if (!config.contains("tools")) return;
    for (const auto& t : config["tools"]) {
        std::string kind = t.value("kind", "");
        std::string name = t.value("name", "");
        if (kind == "knowledge") {
            KnowledgeSource source;
            std::string sk = t.value("source_kind", "");
            if (sk == "symbolic") source.kind = KnowledgeKind::symbolic;
            else if (sk == "textual") source.kind = KnowledgeKind::textual;
            else if (sk == "web") source.kind = KnowledgeKind::web;
            else throw std::invalid_argument("unknown source_kind for tool " + name);
            source.locator = t.value("locator", "");
            source.description = t.value("description", "");
            register_knowledge_tool(registry, name, std::move(source), embed, fetch, options);
        } else if (kind == "utility") {
            register_utility_tool(registry, name, t.value("description", ""), t.value("command", ""));
        } else {
            throw std::invalid_argument("unknown tool kind '" + kind + "' for tool " + name);
        }
    }
}

inline void configure_registry_file(ToolRegistry& registry, const std::string& path,
                                    EmbeddingFn embed = {}, WebFetchFn fetch = {},
                                    SqlSubagentOptions options = {}) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open tool config: " + path);
    nlohmann::json config = nlohmann::json::parse(in);
    configure_registry(registry, config, std::move(embed), std::move(fetch), options);
}

} // namespace treeact

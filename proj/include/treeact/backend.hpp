#pragma once

#include <atomic>
#include <cstdint>
#include <deque>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "treeact/common.hpp"

namespace treeact {

struct ChatTurn {
    std::string role; // "user" or "assistant"
    std::string text;
};

struct ChatRequest {
    std::string system_prompt;
    std::vector<ChatTurn> turns; // non-empty
    double temperature = 0.0;
    std::vector<std::string> stop_sequences;
    int max_tokens = 512;

    std::string flat_text() const {
        std::string s = system_prompt;
        for (const auto& t : turns) {
            s += '\n';
            s += t.text;
        }
        return s;
    }
};

struct TokenUsage {
    std::int64_t prompt_tokens = 0;
    std::int64_t completion_tokens = 0;

    TokenUsage& operator+=(const TokenUsage& o) {
        prompt_tokens += o.prompt_tokens;
        completion_tokens += o.completion_tokens;
        return *this;
    }
    std::int64_t total() const { return prompt_tokens + completion_tokens; }
};

struct ChatResponse {
    std::string text;
    TokenUsage usage;
};

// ── Errors ──────────────────────────────────────────────────────────────

struct BackendError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct TransportError : BackendError {
    using BackendError::BackendError;
};
struct ProviderError : BackendError {
    int status = 0;
    std::string body;
    ProviderError(int status_, std::string body_)
        : BackendError("provider returned status " + std::to_string(status_) + ": " + body_),
          status(status_),
          body(std::move(body_)) {}
};
struct ScriptExhausted : BackendError {
    ScriptExhausted() : BackendError("scripted backend ran out of answers") {}
};
struct CassetteMiss : BackendError {
    explicit CassetteMiss(const std::string& fp)
        : BackendError("cassette miss for fingerprint " + fp), fingerprint(fp) {}
    std::string fingerprint;
};
struct CorruptCassette : BackendError {
    using BackendError::BackendError;
};

// ── Fingerprinting ──────────────────────────────────────────────────────

// Canonical serialization: nlohmann objects keep keys sorted and dump()
// emits no insignificant whitespace, so equal field values fingerprint
// equal regardless of construction order.
inline std::string canonical_request_json(const ChatRequest& req) {
    nlohmann::json turns = nlohmann::json::array();
    for (const auto& t : req.turns) turns.push_back({{"role", t.role}, {"text", t.text}});
    nlohmann::json j{
        {"max_tokens", req.max_tokens},
        {"stop_sequences", req.stop_sequences},
        {"system_prompt", req.system_prompt},
        {"temperature", req.temperature},
        {"turns", turns},
    };
    return j.dump();
}

inline std::string request_fingerprint(const ChatRequest& req) {
    return to_hex(fnv1a64(canonical_request_json(req)));
}

// Truncate at the first stop-sequence occurrence, matching what chat
// providers do server-side.
inline std::string apply_stop_sequences(std::string text, const std::vector<std::string>& stops) {
    size_t cut = std::string::npos;
    for (const auto& stop : stops) {
        if (stop.empty()) continue;
        size_t pos = text.find(stop);
        if (pos != std::string::npos && pos < cut) cut = pos;
    }
    if (cut != std::string::npos) text.resize(cut);
    return text;
}

// Rough chars/4 estimate, used only by offline backends so that token
// accounting stays meaningful without a real tokenizer.
inline std::int64_t estimate_tokens(std::string_view text) {
    return static_cast<std::int64_t>(text.size() / 4);
}

// ── Backend interface ───────────────────────────────────────────────────

// Chat-completion provider. Implementations must be safe for concurrent
// complete() calls; a backend may be shared across sessions.
class ChatBackend {
public:
    virtual ~ChatBackend() = default;
    virtual ChatResponse complete(const ChatRequest& request) = 0;
    virtual std::string name() const = 0;
};

// FIFO queue of canned completions; consumed atomically.
class ScriptedBackend : public ChatBackend {
public:
    ScriptedBackend() = default;
    explicit ScriptedBackend(std::vector<std::string> replies) {
        for (auto& r : replies) queue_.push_back(std::move(r));
    }

    void push(std::string reply) {
        std::lock_guard lk(mu_);
        queue_.push_back(std::move(reply));
    }

    size_t remaining() const {
        std::lock_guard lk(mu_);
        return queue_.size();
    }

    ChatResponse complete(const ChatRequest& request) override {
        std::string reply;
        {
            std::lock_guard lk(mu_);
            if (queue_.empty()) throw ScriptExhausted{};
            reply = std::move(queue_.front());
            queue_.pop_front();
        }
        reply = apply_stop_sequences(std::move(reply), request.stop_sequences);
        return {reply, {estimate_tokens(request.flat_text()), estimate_tokens(reply)}};
    }

    std::string name() const override { return "scripted"; }

private:
    mutable std::mutex mu_;
    std::deque<std::string> queue_;
};

// Completion computed from the request. The workhorse for simulation
// harnesses and oracle tests, where the reply must depend on context.
class FnBackend : public ChatBackend {
public:
    using Fn = std::function<std::string(const ChatRequest&)>;

    explicit FnBackend(Fn fn) : fn_(std::move(fn)) {}

    ChatResponse complete(const ChatRequest& request) override {
        std::string reply = apply_stop_sequences(fn_(request), request.stop_sequences);
        return {reply, {estimate_tokens(request.flat_text()), estimate_tokens(reply)}};
    }

    std::string name() const override { return "fn"; }

private:
    Fn fn_;
};

// Counts calls and accumulates token usage while delegating. One of these
// wraps the session backend so per-session counters can be reported.
class MeteredBackend : public ChatBackend {
public:
    explicit MeteredBackend(ChatBackend& inner) : inner_(inner) {}

    ChatResponse complete(const ChatRequest& request) override {
        auto resp = inner_.complete(request);
        std::lock_guard lk(mu_);
        ++calls_;
        usage_ += resp.usage;
        return resp;
    }

    std::string name() const override { return inner_.name(); }

    std::int64_t calls() const {
        std::lock_guard lk(mu_);
        return calls_;
    }
    TokenUsage usage() const {
        std::lock_guard lk(mu_);
        return usage_;
    }

private:
    ChatBackend& inner_;
    mutable std::mutex mu_;
    std::int64_t calls_ = 0;
    TokenUsage usage_;
};

// ── Record / replay cassettes ───────────────────────────────────────────
//
// Cassette file: JSON Lines, one entry per line:
//   {"fingerprint": "<hex>", "response": {"text": ..., "prompt_tokens": ..., "completion_tokens": ...}}

enum class CassetteMode { record, replay };

class RecordReplayBackend : public ChatBackend {
public:
    // record: delegates to inner and appends one entry per new fingerprint.
    // replay: answers from the cassette only; inner may be null.
    RecordReplayBackend(ChatBackend* inner, std::string path, CassetteMode mode)
        : inner_(inner), path_(std::move(path)), mode_(mode) {
        if (mode_ == CassetteMode::record) {
            if (!inner_) throw std::invalid_argument("record mode requires an inner backend");
            out_.open(path_, std::ios::trunc);
            if (!out_) throw std::runtime_error("cannot open cassette for writing: " + path_);
        } else {
            load();
        }
    }

    ChatResponse complete(const ChatRequest& request) override {
        const std::string fp = request_fingerprint(request);
        if (mode_ == CassetteMode::replay) {
            std::lock_guard lk(mu_);
            auto it = entries_.find(fp);
            if (it == entries_.end()) throw CassetteMiss(fp);
            return it->second;
        }
        auto resp = inner_->complete(request);
        std::lock_guard lk(mu_);
        if (entries_.emplace(fp, resp).second) {
            nlohmann::json j{{"fingerprint", fp},
                             {"response",
                              {{"text", resp.text},
                               {"prompt_tokens", resp.usage.prompt_tokens},
                               {"completion_tokens", resp.usage.completion_tokens}}}};
            out_ << j.dump() << '\n';
            out_.flush();
        }
        return resp;
    }

    std::string name() const override {
        return mode_ == CassetteMode::record ? "record" : "replay";
    }

    size_t entry_count() const {
        std::lock_guard lk(mu_);
        return entries_.size();
    }

private:
    void load() {
        std::ifstream in(path_);
        if (!in) throw std::runtime_error("cannot open cassette for reading: " + path_);
        std::string line;
        size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (trim(line).empty()) continue;
            nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
            if (j.is_discarded() || !j.contains("fingerprint") || !j.contains("response"))
                throw CorruptCassette("corrupt cassette entry at line " + std::to_string(lineno) +
                                      " in " + path_);
            ChatResponse resp;
            const auto& r = j["response"];
            resp.text = r.value("text", "");
            resp.usage.prompt_tokens = r.value("prompt_tokens", std::int64_t{0});
            resp.usage.completion_tokens = r.value("completion_tokens", std::int64_t{0});
            entries_[j["fingerprint"].get<std::string>()] = std::move(resp);
        }
    }

    ChatBackend* inner_;
    std::string path_;
    CassetteMode mode_;
    std::ofstream out_;
    mutable std::mutex mu_;
    std::map<std::string, ChatResponse> entries_;
};

} // namespace treeact

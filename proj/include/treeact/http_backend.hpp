#pragma once

#include <chrono>
#include <string>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "treeact/backend.hpp"

namespace treeact {

struct HttpBackendConfig {
    std::string base_url;          // e.g. "https://api.openai.com" or "http://127.0.0.1:8089"
    std::string path = "/v1/chat/completions";
    std::string api_key;           // sent as "Authorization: Bearer <key>" when non-empty
    std::string model = "gpt-3.5-turbo";
    int transport_retries = 2;     // retries after the first attempt
    int retry_backoff_ms = 1000;   // fixed backoff between attempts
    int timeout_seconds = 60;
};

// OpenAI-style chat-completion client. One POST per complete() call;
// transport failures are retried on a fixed backoff, provider errors
// (non-2xx) surface status and body without retrying.
class HttpBackend : public ChatBackend {
public:
    explicit HttpBackend(HttpBackendConfig cfg) : cfg_(std::move(cfg)) {
        if (cfg_.base_url.empty())
            throw std::invalid_argument("HttpBackend: base_url must be configured");
    }

    ChatResponse complete(const ChatRequest& request) override {
        nlohmann::json messages = nlohmann::json::array();
        if (!request.system_prompt.empty())
            messages.push_back({{"role", "system"}, {"content", request.system_prompt}});
        for (const auto& t : request.turns)
            messages.push_back({{"role", t.role}, {"content", t.text}});

        nlohmann::json body{
            {"model", cfg_.model},
            {"messages", messages},
            {"temperature", request.temperature},
            {"max_tokens", request.max_tokens},
        };
        if (!request.stop_sequences.empty()) body["stop"] = request.stop_sequences;

        std::string payload = body.dump();
        std::string last_error;
        for (int attempt = 0; attempt <= cfg_.transport_retries; ++attempt) {
            if (attempt > 0)
                std::this_thread::sleep_for(std::chrono::milliseconds(cfg_.retry_backoff_ms));
            httplib::Client client(cfg_.base_url);
            client.set_read_timeout(cfg_.timeout_seconds, 0);
            client.set_connection_timeout(cfg_.timeout_seconds, 0);
            httplib::Headers headers;
            if (!cfg_.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg_.api_key);

            auto res = client.Post(cfg_.path, headers, payload, "application/json");
            if (!res) {
                last_error = httplib::to_string(res.error());
                continue; // transport failure, retry
            }
            if (res->status < 200 || res->status >= 300) throw ProviderError(res->status, res->body);
            return parse_response(res->body, request);
        }
        throw TransportError("chat completion transport failed after " +
                             std::to_string(cfg_.transport_retries + 1) + " attempts: " + last_error);
    }

    std::string name() const override { return "http:" + cfg_.model; }

private:
    ChatResponse parse_response(const std::string& body, const ChatRequest& request) const {
        nlohmann::json j = nlohmann::json::parse(body, nullptr, false);
        if (j.is_discarded()) throw ProviderError(200, "unparsable provider body: " + body);
        ChatResponse resp;
        try {
            resp.text = j.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const nlohmann::json::exception&) {
            throw ProviderError(200, "provider body missing choices[0].message.content: " + body);
        }
        if (j.contains("usage")) {
            resp.usage.prompt_tokens = j["usage"].value("prompt_tokens", std::int64_t{0});
            resp.usage.completion_tokens = j["usage"].value("completion_tokens", std::int64_t{0});
        } else {
            resp.usage = {estimate_tokens(request.flat_text()), estimate_tokens(resp.text)};
        }
        resp.text = apply_stop_sequences(std::move(resp.text), request.stop_sequences);
        return resp;
    }

    HttpBackendConfig cfg_;
};

} // namespace treeact

#pragma once

// HTTP judge backend, kept in its own header so only remote-mode builds pull
// in httplib. Contract: POST {"prompt": string} -> {"text": string}.

#include <httplib.h>

#include "selecom/datagen.hpp"

namespace selecom {

class HttpJudge : public JudgeClient {
public:
    explicit HttpJudge(HttpJudgeConfig cfg) : cfg_(std::move(cfg)) {}

    std::string complete(const std::string& prompt) override {
        const std::string body = nlohmann::json{{"prompt", prompt}}.dump();
        for (int attempt = 0; attempt <= cfg_.retries; ++attempt) {
            httplib::Client client(cfg_.host, cfg_.port);
            client.set_connection_timeout(cfg_.timeout_sec);
            client.set_read_timeout(cfg_.timeout_sec);
            auto res = client.Post(cfg_.path, body, "application/json");
            if (!res || res->status != 200) continue;
            try {
                return nlohmann::json::parse(res->body).at("text").get<std::string>();
            } catch (const std::exception&) {
                // malformed body: fall through to retry
            }
        }
        // The caller's retry-then-quarantine path treats this as malformed.
        return "";
    }

private:
    HttpJudgeConfig cfg_;
};

}  // namespace selecom

#pragma once

#include <chrono>
#include <cstdlib>
#include <string>
#include <thread>

#include "httplib.h"
#include "json.hpp"

#include "synthfeed/backend.hpp"

namespace synthfeed::genbackend {

// Environment override for the server address, e.g.
//   SYNTHFEED_BASE_URL=http://127.0.0.1:8711
constexpr const char* kBaseUrlEnv = "SYNTHFEED_BASE_URL";

struct HttpBackendConfig {
    std::string base_url = "http://127.0.0.1:8711";
    int timeout_ms = 10000;
    int max_retries = 3;     // total attempts
    int retry_backoff_ms = 50;
};

// Client for an external inference server speaking
//   POST {base_url}/generate
//   body:     {"prompt", "max_tokens", "temperature", "top_p", "n", "stop", "seed"}
//   response: {"choices": [{"text": ...}, ...]}
// Stop strings are enforced client-side as well, so the invariant that returned
// text never contains a stop string holds even for servers that ignore "stop".
class HttpBackend : public Backend {
public:
    explicit HttpBackend(HttpBackendConfig cfg = {}) : cfg_(std::move(cfg)) {
        if (const char* env = std::getenv(kBaseUrlEnv); env && *env)
            cfg_.base_url = env;
        if (cfg_.max_retries < 1) cfg_.max_retries = 1;
    }

    const HttpBackendConfig& config() const { return cfg_; }

    GenResponse generate(const GenRequest& req) override {
        req.validate();
        nlohmann::json body = {
            {"prompt", req.prompt},   {"max_tokens", req.max_tokens},
            {"temperature", req.temperature}, {"top_p", req.top_p},
            {"n", req.n},             {"stop", req.stop},
            {"seed", req.seed},
        };
        const std::string payload = body.dump();

        std::string last_error;
        for (int attempt = 1; attempt <= cfg_.max_retries; ++attempt) {
            httplib::Client cli(cfg_.base_url);
            cli.set_connection_timeout(0, cfg_.timeout_ms * 1000);
            cli.set_read_timeout(cfg_.timeout_ms / 1000, (cfg_.timeout_ms % 1000) * 1000);
            auto res = cli.Post("/generate", payload, "application/json");
            if (!res) {
                last_error = "transport failure contacting " + cfg_.base_url +
                             ": " + httplib::to_string(res.error());
            } else if (res->status < 200 || res->status >= 300) {
                last_error = cfg_.base_url + "/generate returned status " +
                             std::to_string(res->status);
            } else {
                try {
                    return parse_response(res->body, req.n, req.stop);
                } catch (const std::exception& e) {
                    // malformed payload will not improve on retry
                    throw BackendError(e.what(), attempt);
                }
            }
            if (attempt < cfg_.max_retries)
                std::this_thread::sleep_for(
                    std::chrono::milliseconds(cfg_.retry_backoff_ms * attempt));
        }
        throw BackendError(last_error, cfg_.max_retries);
    }

    std::string name() const override { return "http:" + cfg_.base_url; }

private:
    HttpBackendConfig cfg_;

    static GenResponse parse_response(const std::string& body, int n,
                                      const std::vector<std::string>& stop) {
        nlohmann::json j = nlohmann::json::parse(body);
        if (!j.contains("choices") || !j["choices"].is_array())
            throw std::runtime_error("server response missing \"choices\" array");
        GenResponse out;
        for (const auto& ch : j["choices"]) {
            Completion c;
            c.text = ch.at("text").get<std::string>();
            // truncate at the earliest stop-string occurrence
            size_t cut = std::string::npos;
            for (const auto& s : stop) {
                size_t at = c.text.find(s);
                if (at != std::string::npos) cut = std::min(cut, at);
            }
            if (cut != std::string::npos) c.text.resize(cut);
            out.completions.push_back(std::move(c));
        }
        if (int(out.completions.size()) != n)
            throw std::runtime_error("server returned " +
                                     std::to_string(out.completions.size()) +
                                     " completions, expected " + std::to_string(n));
        return out;
    }
};

} // namespace synthfeed::genbackend

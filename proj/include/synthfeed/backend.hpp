#pragma once

#include <algorithm>
#include <cstdlib>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "synthfeed/tinylm.hpp"
#include "synthfeed/types.hpp"
#include "synthfeed/util.hpp"

namespace synthfeed::genbackend {

struct GenRequest {
    std::string prompt;
    int max_tokens = 384;
    double temperature = 1.0;
    double top_p = 0.9;
    int n = 1;
    std::vector<std::string> stop;
    uint64_t seed = 0;

    // temperature 0 is the argmax (greedy) limit
    void validate() const {
        if (max_tokens < 1) throw std::invalid_argument("max_tokens must be >= 1");
        if (n < 1) throw std::invalid_argument("n must be >= 1");
        if (!(top_p > 0.0 && top_p <= 1.0))
            throw std::invalid_argument("top_p must be in (0, 1]");
        if (!(temperature >= 0.0) || !std::isfinite(temperature))
            throw std::invalid_argument("temperature must be finite and >= 0");
        for (const auto& s : stop)
            if (s.empty()) throw std::invalid_argument("empty stop string");
    }

    static GenRequest from(std::string prompt, const core::SamplingParams& sp,
                           uint64_t seed, std::vector<std::string> stop = {}) {
        GenRequest r;
        r.prompt = std::move(prompt);
        r.max_tokens = sp.max_tokens;
        r.temperature = sp.temperature;
        r.top_p = sp.top_p;
        r.stop = std::move(stop);
        r.seed = seed;
        return r;
    }
};

struct Completion {
    std::string text;
    std::optional<std::vector<double>> token_logprobs;
};

struct GenResponse {
    std::vector<Completion> completions;
};

class BackendError : public std::runtime_error {
public:
    BackendError(const std::string& what, int attempts)
        : std::runtime_error(what + " (after " + std::to_string(attempts) +
                             (attempts == 1 ? " attempt)" : " attempts)")),
          attempts_(attempts) {}
    int attempts() const { return attempts_; }

private:
    int attempts_ = 0;
};

class Backend {
public:
    virtual ~Backend() = default;
    virtual GenResponse generate(const GenRequest& req) = 0;
    virtual std::string name() const = 0;
};

// Draw one token id: nucleus (top-p) truncation happens on the *untempered*
// distribution; temperature then rescales only the surviving tokens.
// temperature == 0 returns the argmax (ties resolved to the lowest token id).
inline int sample_token(const std::vector<double>& logits, double top_p,
                        double temperature, util::Rng& rng) {
    const int V = int(logits.size());
    std::vector<int> order(V);
    for (int i = 0; i < V; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (logits[a] != logits[b]) return logits[a] > logits[b];
        return a < b;
    });
    if (temperature == 0.0) return order[0];

    std::vector<double> p = TinyLm::softmax(logits);
    int keep = V;
    double cum = 0.0;
    for (int i = 0; i < V; ++i) {
        cum += p[order[i]];
        if (cum >= top_p - 1e-12) {
            keep = i + 1;
            break;
        }
    }
    // renormalize survivors at the requested temperature (in log space)
    double mx = logits[order[0]];
    std::vector<double> w(keep);
    double z = 0.0;
    for (int i = 0; i < keep; ++i) {
        w[i] = std::exp((logits[order[i]] - mx) / temperature);
        z += w[i];
    }
    double u = rng.uniform() * z;
    double acc = 0.0;
    for (int i = 0; i < keep; ++i) {
        acc += w[i];
        if (u < acc) return order[i];
    }
    return order[keep - 1];
}

class TinyLmBackend : public Backend {
public:
    explicit TinyLmBackend(TinyLm lm) : lm_(std::move(lm)) {}

    const TinyLm& model() const { return lm_; }
    TinyLm& model() { return lm_; }

    GenResponse generate(const GenRequest& req) override {
        req.validate();
        GenResponse out;
        out.completions.reserve(size_t(req.n));
        for (int i = 0; i < req.n; ++i) {
            util::Rng rng = util::Rng(req.seed).derive("completion", uint64_t(i));
            out.completions.push_back(sample_one(req, rng));
        }
        return out;
    }

    std::string name() const override { return "tinylm"; }

private:
    TinyLm lm_;

    Completion sample_one(const GenRequest& req, util::Rng& rng) const {
        std::vector<int> prompt = TinyLm::tokens_of(req.prompt, true);
        // keep the most recent context if the prompt alone is too long,
        // always leaving room to generate at least one token
        int budget = lm_.dims.max_seq - 1;
        if (int(prompt.size()) > budget)
            prompt.erase(prompt.begin(), prompt.end() - budget);

        TinyLm::DecodeState st;
        std::vector<double> logits;
        for (int tok : prompt) logits = lm_.decode_step(st, tok);

        std::string text;
        for (int produced = 0; produced < req.max_tokens; ++produced) {
            if (st.T >= lm_.dims.max_seq) break;
            int tok = sample_token(logits, req.top_p, req.temperature, rng);
            if (tok == kEos || tok == kBos || tok == kPad) break;
            text.push_back(char(uint8_t(tok)));
            bool stopped = false;
            for (const auto& s : req.stop) {
                if (text.size() >= s.size() &&
                    text.compare(text.size() - s.size(), s.size(), s) == 0) {
                    text.resize(text.size() - s.size());
                    stopped = true;
                    break;
                }
            }
            if (stopped) break;
            if (produced + 1 < req.max_tokens && st.T < lm_.dims.max_seq)
                logits = lm_.decode_step(st, tok);
        }
        return Completion{std::move(text), std::nullopt};
    }
};

} // namespace synthfeed::genbackend

#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include "synthfeed/backend.hpp"
#include "synthfeed/types.hpp"
#include "synthfeed/util.hpp"

namespace synthfeed::querygen {

// Token-level longest-common-subsequence F1 with whitespace tokenization and
// lowercase folding; symmetric in its arguments.
inline double rouge_l(std::string_view candidate, std::string_view reference) {
    std::vector<std::string> c = util::split_ws(util::to_lower(std::string(candidate)));
    std::vector<std::string> r = util::split_ws(util::to_lower(std::string(reference)));
    if (c.empty() || r.empty()) return 0.0;
    const size_t n = c.size(), m = r.size();
    std::vector<size_t> prev(m + 1, 0), cur(m + 1, 0);
    for (size_t i = 1; i <= n; ++i) {
        for (size_t j = 1; j <= m; ++j) {
            if (c[i - 1] == r[j - 1]) cur[j] = prev[j - 1] + 1;
            else cur[j] = std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    const double lcs = double(prev[m]);
    const double p = lcs / double(n), q = lcs / double(m);
    if (p + q == 0.0) return 0.0;
    return 2.0 * p * q / (p + q);
}

struct MinerConfig {
    std::vector<std::string> seed_queries;
    int static_shots = 7;
    int dynamic_shots = 3;
    std::vector<std::string> badwords = {"image", "graph", "picture", "video"};
    double rouge_threshold = 0.5;
    int target_count = 100;
    int budget_per_query = 50; // attempt budget = this * target_count
    core::SamplingParams sampling{0.9, 1.2, 384}; // hotter than other stages

    void validate() const {
        if (seed_queries.size() < 10)
            throw std::invalid_argument("need at least 10 seed queries");
        if (static_shots < 0 || dynamic_shots < 0)
            throw std::invalid_argument("shot counts must be non-negative");
        if (size_t(static_shots + dynamic_shots) > seed_queries.size())
            throw std::invalid_argument("static + dynamic shots exceed the seed pool");
        if (rouge_threshold < 0.0 || rouge_threshold > 1.0)
            throw std::invalid_argument("rouge_threshold must be in [0,1]");
        if (target_count < 1) throw std::invalid_argument("target_count must be positive");
        sampling.validate();
    }
};

struct MineStats {
    int64_t attempts = 0;
    int64_t rejected_badword = 0;
    int64_t rejected_duplicate = 0;
    int64_t rejected_empty = 0;
    // acceptance-rate trajectory, one entry per 100 attempts
    std::vector<double> acceptance_rate;
};

// Budget exhausted before reaching target_count; carries what was accepted.
class PartialResultError : public std::runtime_error {
public:
    PartialResultError(std::string what, std::vector<core::Query> accepted)
        : std::runtime_error(std::move(what)), accepted_(std::move(accepted)) {}
    const std::vector<core::Query>& accepted() const { return accepted_; }

private:
    std::vector<core::Query> accepted_;
};

namespace detail {

inline std::string first_line(const std::string& text) {
    size_t nl = text.find('\n');
    return util::trim(nl == std::string::npos ? text : text.substr(0, nl));
}

inline bool has_badword(const std::string& text, const std::vector<std::string>& bad) {
    for (const auto& w : bad)
        if (util::contains_ci(text, w)) return true;
    return false;
}

} // namespace detail

// Few-shot bootstrap mining: each attempt prompts the backend with static seed
// shots plus dynamic shots drawn from already-accepted queries (falling back to
// unused seeds while the accepted pool is small), keeps the first line of the
// completion, and filters by badwords and Rouge-L overlap against everything
// already in the pool (seeds included).
inline std::vector<core::Query> mine_queries(const MinerConfig& cfg,
                                             genbackend::Backend& backend,
                                             const core::RunConfig& run,
                                             MineStats* stats_out = nullptr) {
    cfg.validate();
    util::Rng stage = run.stage_rng("mine-queries");
    std::vector<core::Query> accepted;
    MineStats stats;
    const int64_t budget = int64_t(cfg.budget_per_query) * cfg.target_count;

    auto too_similar = [&](const std::string& q) {
        for (const auto& s : cfg.seed_queries) {
            double f = std::max(rouge_l(q, s), rouge_l(s, q));
            if (f > cfg.rouge_threshold) return true;
        }
        for (const auto& a : accepted) {
            double f = std::max(rouge_l(q, a.text), rouge_l(a.text, q));
            if (f > cfg.rouge_threshold) return true;
        }
        return false;
    };

    int64_t window_attempts = 0, window_accepted = 0;
    for (int64_t attempt = 0; attempt < budget && int(accepted.size()) < cfg.target_count;
         ++attempt) {
        util::Rng arng = stage.derive("attempt", uint64_t(attempt));
        // prompt: static seeds, then dynamic shots from the accepted pool
        std::string prompt;
        for (int i = 0; i < cfg.static_shots; ++i)
            prompt += "Query: " + cfg.seed_queries[size_t(i)] + "\n";
        std::vector<const std::string*> pool;
        for (const auto& a : accepted) pool.push_back(&a.text);
        for (size_t i = size_t(cfg.static_shots); i < cfg.seed_queries.size(); ++i)
            if (pool.size() < size_t(cfg.dynamic_shots) + 8) pool.push_back(&cfg.seed_queries[i]);
        for (int i = 0; i < cfg.dynamic_shots && !pool.empty(); ++i) {
            size_t k = arng.below(pool.size());
            prompt += "Query: " + *pool[k] + "\n";
            pool.erase(pool.begin() + ptrdiff_t(k));
        }
        prompt += "Query:";

        genbackend::GenRequest req =
            genbackend::GenRequest::from(prompt, cfg.sampling, arng.derive("gen").seed(),
                                         {"\nQuery:"});
        genbackend::GenResponse resp = backend.generate(req);
        ++stats.attempts;
        ++window_attempts;
        std::string q = detail::first_line(resp.completions.at(0).text);
        if (q.rfind("Query:", 0) == 0) q = util::trim(q.substr(6));

        bool ok = false;
        if (q.empty()) {
            ++stats.rejected_empty;
        } else if (detail::has_badword(q, cfg.badwords)) {
            ++stats.rejected_badword;
        } else if (too_similar(q)) {
            ++stats.rejected_duplicate;
        } else {
            core::Query rec;
            char id[24];
            std::snprintf(id, sizeof id, "q-%05zu", accepted.size());
            rec.id = id;
            rec.text = q;
            accepted.push_back(std::move(rec));
            ok = true;
        }
        if (ok) ++window_accepted;
        if (window_attempts == 100) {
            stats.acceptance_rate.push_back(double(window_accepted) / 100.0);
            window_attempts = window_accepted = 0;
        }
    }

    if (stats_out) *stats_out = stats;
    if (int(accepted.size()) < cfg.target_count) {
        // build the message before std::move empties the vector
        std::string msg = "query mining exhausted its attempt budget (" +
                          std::to_string(budget) + ") with " +
                          std::to_string(accepted.size()) + "/" +
                          std::to_string(cfg.target_count) + " accepted";
        throw PartialResultError(std::move(msg), std::move(accepted));
    }
    return accepted;
}

} // namespace synthfeed::querygen

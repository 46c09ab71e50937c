#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "synthfeed/backend.hpp"
#include "synthfeed/reward_model.hpp"
#include "synthfeed/types.hpp"
#include "synthfeed/util.hpp"

namespace synthfeed::synthcmp {

enum class KeywordMode { begins_with, contains };

struct HeuristicFilterConfig {
    struct Keyword {
        std::string text;
        KeywordMode mode;
    };
    // "contains" is scoped to the first sentence, so a hedge or refusal at the
    // start of a response triggers it without nuking later legitimate uses
    std::vector<Keyword> bad_keywords = {
        {"I don't know", KeywordMode::contains},
        {"well", KeywordMode::begins_with},
    };

    void validate() const {
        if (bad_keywords.empty())
            throw std::invalid_argument("heuristic filter needs at least one keyword");
        for (const auto& k : bad_keywords)
            if (k.text.empty()) throw std::invalid_argument("empty filter keyword");
    }

    bool flags(const std::string& response) const {
        std::string low = util::to_lower(util::trim(response));
        for (const auto& k : bad_keywords) {
            std::string kw = util::to_lower(k.text);
            if (k.mode == KeywordMode::begins_with) {
                if (low.rfind(kw, 0) == 0) return true;
            } else {
                size_t end = low.find_first_of(".!?");
                std::string first = end == std::string::npos ? low : low.substr(0, end + 1);
                if (first.find(kw) != std::string::npos) return true;
            }
        }
        return false;
    }
};

struct LengthStats {
    double mean = 0.0;
    double stddev = 0.0; // population

    static LengthStats of(const core::RankedResponseSet& set) {
        std::vector<double> lens;
        lens.reserve(set.items.size());
        for (const auto& [cfg, text] : set.items) lens.push_back(double(text.size()));
        return {util::mean(lens), util::pop_std(lens)};
    }

    double short_cutoff() const { return mean - stddev / 2.0; }
};

// ---- lattice sampling ------------------------------------------------------------

using BackendMap = std::map<std::string, genbackend::Backend*>;

inline std::string generation_prompt(const core::Query& q) {
    return "Human: " + q.text + "\n\nAssistant: ";
}

inline core::RankedResponseSet sample_lattice(const core::Query& query,
                                              const std::vector<core::GeneratorConfig>& configs,
                                              const BackendMap& backends,
                                              const core::RunConfig& run) {
    core::validate_config_set(configs);
    std::vector<core::GeneratorConfig> ordered = configs;
    std::sort(ordered.begin(), ordered.end(),
              [](const auto& a, const auto& b) { return a.quality_rank < b.quality_rank; });

    core::RankedResponseSet set;
    set.query = query;
    util::Rng stage = run.stage_rng("lattice");
    for (const auto& cfg : ordered) {
        auto it = backends.find(cfg.name);
        if (it == backends.end() || !it->second)
            throw std::invalid_argument("no backend for config " + cfg.name);
        genbackend::GenRequest req = genbackend::GenRequest::from(
            generation_prompt(query), run.sampling,
            stage.derive(query.id, cfg.name).seed(), {"\nHuman:", "\n\nHuman:"});
        genbackend::GenResponse resp = it->second->generate(req);
        set.items.emplace_back(cfg, resp.completions.at(0).text);
    }
    set.validate();
    return set;
}

// ---- binarization ----------------------------------------------------------------

// all C(n,2) ordered pairs, lexicographic by rank index; pairs whose two texts
// are identical are dropped (counted in dropped_identical)
inline std::vector<core::ComparisonPair> binarize(const core::RankedResponseSet& set,
                                                  int* dropped_identical = nullptr) {
    set.validate();
    std::vector<core::ComparisonPair> out;
    int dropped = 0;
    const size_t n = set.items.size();
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = i + 1; j < n; ++j) {
            const auto& [ci, ti] = set.items[i];
            const auto& [cj, tj] = set.items[j];
            if (ti == tj) {
                ++dropped;
                continue;
            }
            core::ComparisonPair p;
            p.query = set.query;
            p.chosen = ti;
            p.rejected = tj;
            p.chosen_config = ci;
            p.rejected_config = cj;
            p.validate();
            out.push_back(std::move(p));
        }
    }
    if (dropped_identical) *dropped_identical = dropped;
    return out;
}

// ---- post-validation -------------------------------------------------------------

// (a) drop pairs whose chosen response hits a bad keyword (a flagged rejected
//     response is fine — losing to anything is consistent with being bad);
// (b) keep a pair only if chosen is longer than rejected, or longer than the
//     set-level cutoff M - S/2 (characters, stats over the full response set).
inline std::vector<core::ComparisonPair> heuristic_filter(
    const std::vector<core::ComparisonPair>& pairs, const core::RankedResponseSet& set,
    const HeuristicFilterConfig& hf) {
    hf.validate();
    const LengthStats stats = LengthStats::of(set);
    const double cutoff = stats.short_cutoff();
    std::vector<core::ComparisonPair> out;
    for (const auto& p : pairs) {
        if (hf.flags(p.chosen)) continue;
        const double lc = double(p.chosen.size());
        const double lr = double(p.rejected.size());
        if (lc > lr || lc > cutoff) out.push_back(p);
    }
    return out;
}

// keep a pair only when the auxiliary scorer strictly agrees with its ordering
inline std::vector<core::ComparisonPair> asis_filter(
    const std::vector<core::ComparisonPair>& pairs, const rm::RewardModel& asis_rm,
    int jobs = 1) {
    std::vector<char> keep(pairs.size(), 0);
    util::parallel_for(pairs.size(), jobs, [&](size_t i) {
        double sc = asis_rm.score(pairs[i].query.text, pairs[i].chosen);
        double sr = asis_rm.score(pairs[i].query.text, pairs[i].rejected);
        keep[i] = sc > sr ? 1 : 0; // tie is non-agreement
    });
    std::vector<core::ComparisonPair> out;
    for (size_t i = 0; i < pairs.size(); ++i)
        if (keep[i]) out.push_back(pairs[i]);
    return out;
}

// ---- full data engine ------------------------------------------------------------

struct StageCounts {
    int64_t queries = 0;
    int64_t sets = 0;            // successfully sampled response sets
    int64_t responses = 0;       // responses across all sets
    int64_t keyword_removed = 0; // responses removed from sets before pairing
    int64_t pairs_built = 0;     // after binarization (pre length rule)
    int64_t identical_dropped = 0;
    int64_t after_length_rule = 0;
    int64_t after_asis = 0;

    nlohmann::json to_json() const {
        return {{"queries", queries},
                {"sets", sets},
                {"responses", responses},
                {"keyword_removed", keyword_removed},
                {"pairs_built", pairs_built},
                {"identical_dropped", identical_dropped},
                {"after_length_rule", after_length_rule},
                {"after_asis", after_asis}};
    }
};

struct RejectEntry {
    std::string query_id;
    std::string reason;
};

struct BuildOptions {
    bool use_hf = true;
    bool use_asis = true;
    HeuristicFilterConfig hf;
    int jobs = 1;
};

struct BuildResult {
    std::vector<core::ComparisonPair> pairs;
    StageCounts counts;
    std::vector<RejectEntry> rejects;
};

// sample -> (keyword cleanup of the response set) -> binarize -> length rule
// -> as-is agreement; per-query work is parallel, results merge in input order
inline BuildResult build_comparison_dataset(const std::vector<core::Query>& queries,
                                            const std::vector<core::GeneratorConfig>& configs,
                                            const BackendMap& backends,
                                            const rm::RewardModel* asis_rm,
                                            const core::RunConfig& run,
                                            const BuildOptions& opt = {}) {
    if (opt.use_asis && !asis_rm)
        throw std::invalid_argument("as-is filtering requested but no model given");
    core::validate_config_set(configs);

    struct PerQuery {
        std::vector<core::ComparisonPair> pairs;
        StageCounts counts;
        std::string error;
    };
    std::vector<PerQuery> results(queries.size());

    util::parallel_for(queries.size(), opt.jobs, [&](size_t qi) {
        PerQuery& r = results[qi];
        try {
            core::RankedResponseSet full = sample_lattice(queries[qi], configs, backends, run);
            r.counts.sets = 1;
            r.counts.responses = int64_t(full.items.size());

            core::RankedResponseSet cleaned = full;
            if (opt.use_hf) {
                auto& items = cleaned.items;
                auto flagged = [&](const auto& item) { return opt.hf.flags(item.second); };
                r.counts.keyword_removed =
                    int64_t(std::count_if(items.begin(), items.end(), flagged));
                items.erase(std::remove_if(items.begin(), items.end(), flagged),
                            items.end());
                if (items.size() < 2) {
                    r.error = "fewer than 2 responses after keyword cleanup";
                    return;
                }
            }

            int dropped = 0;
            std::vector<core::ComparisonPair> pairs = binarize(cleaned, &dropped);
            r.counts.pairs_built = int64_t(pairs.size());
            r.counts.identical_dropped = dropped;

            if (opt.use_hf) pairs = heuristic_filter(pairs, full, opt.hf);
            r.counts.after_length_rule = int64_t(pairs.size());

            if (opt.use_asis) pairs = asis_filter(pairs, *asis_rm);
            r.counts.after_asis = int64_t(pairs.size());
            r.pairs = std::move(pairs);
        } catch (const std::exception& e) {
            r.error = e.what();
        }
    });

    BuildResult out;
    out.counts.queries = int64_t(queries.size());
    for (size_t qi = 0; qi < queries.size(); ++qi) {
        PerQuery& r = results[qi];
        if (!r.error.empty()) {
            out.rejects.push_back({queries[qi].id, r.error});
            continue;
        }
        out.counts.sets += r.counts.sets;
        out.counts.responses += r.counts.responses;
        out.counts.keyword_removed += r.counts.keyword_removed;
        out.counts.pairs_built += r.counts.pairs_built;
        out.counts.identical_dropped += r.counts.identical_dropped;
        out.counts.after_length_rule += r.counts.after_length_rule;
        out.counts.after_asis += r.counts.after_asis;
        for (auto& p : r.pairs) out.pairs.push_back(std::move(p));
    }
    if (!opt.use_asis) out.counts.after_asis = out.counts.after_length_rule;
    return out;
}

// ---- generator config files --------------------------------------------------------

inline std::vector<core::GeneratorConfig> configs_from_json(const nlohmann::json& j) {
    std::vector<core::GeneratorConfig> out;
    for (const auto& e : j.at("configs")) {
        core::GeneratorConfig c;
        c.name = e.at("name").get<std::string>();
        c.capability = e.at("capability").get<int>();
        c.shots = e.at("shots").get<int>();
        c.prompt_quality = e.at("prompt_quality").get<int>();
        c.quality_rank = e.at("quality_rank").get<int>();
        out.push_back(std::move(c));
    }
    core::validate_config_set(out);
    return out;
}

inline nlohmann::json configs_to_json(const std::vector<core::GeneratorConfig>& configs) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& c : configs)
        arr.push_back({{"name", c.name},
                       {"capability", c.capability},
                       {"shots", c.shots},
                       {"prompt_quality", c.prompt_quality},
                       {"quality_rank", c.quality_rank}});
    return {{"configs", arr}};
}

} // namespace synthfeed::synthcmp

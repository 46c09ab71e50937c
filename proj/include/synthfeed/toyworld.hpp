#pragma once

#include <algorithm>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "synthfeed/backend.hpp"
#include "synthfeed/types.hpp"
#include "synthfeed/util.hpp"

namespace synthfeed::toyworld {

// Knobs mapping generator ranks to behavior. Prompt quality is the dominant
// factor twice over: the fact-probability coefficients satisfy
// fact_pq > fact_cap + fact_shots, and the hedge/length/refusal curves weight
// the prompt-quality rank by pq_weight. Both are needed for a config that wins
// only on prompt quality to beat one that wins on the other two: with an
// unweighted rank sum, the longer, less hedged responses of the capability+shots
// config would outscore the higher fact rate of the prompt-quality config.
struct ToyParams {
    double fact_base = 0.03, fact_cap = 0.07, fact_shots = 0.05, fact_pq = 0.15;
    double pq_weight = 2.5; // prompt-quality weight in the hedge/length/fail curves
    double hedge_base = 0.90, hedge_slope = 0.13, hedge_floor = 0.0;
    double len_base = 2.0, len_slope = 0.8, len_jitter = 0.5; // items per response
    double fail_base = 0.0, fail_slope = 0.0; // refusal noise, decreasing in ranks
    // the length-credit target sits above the longest typical response so the
    // oracle rarely saturates: saturation ties hide real quality differences
    double target_len = 280.0;
    int max_items = 16;
};

struct KnowledgeTable {
    std::vector<std::string> topics;
    std::map<std::string, std::vector<std::string>> facts;
    uint64_t seed = 0;
    ToyParams params;

    const std::vector<std::string>& facts_of(const std::string& topic) const {
        auto it = facts.find(topic);
        if (it == facts.end())
            throw std::invalid_argument("unknown topic: " + topic);
        return it->second;
    }
};

namespace detail {

inline std::string topic_marker(size_t i) {
    static const std::string singles = "0123456789BCDEFGJKLMNOPQRSTUVXYZ";
    static const std::string uppers = "BCDEFGJKLMNOPQRSTUVXYZ";
    if (i < singles.size()) return std::string(1, singles[i]);
    size_t j = i - singles.size();
    if (j < uppers.size() * 10)
        return std::string(1, uppers[j / 10]) + char('0' + j % 10);
    throw std::invalid_argument("too many topics (max " +
                                std::to_string(singles.size() + uppers.size() * 10) + ")");
}

inline std::string random_word(util::Rng& rng, int len) {
    std::string w;
    for (int i = 0; i < len; ++i) w.push_back(char('a' + rng.below(26)));
    return w;
}

} // namespace detail

inline KnowledgeTable make_table(int n_topics, int facts_per_topic, uint64_t seed,
                                 ToyParams params = {}) {
    if (n_topics < 2) throw std::invalid_argument("need at least 2 topics");
    if (facts_per_topic < 1) throw std::invalid_argument("need at least 1 fact per topic");
    static const char* suffixes[] = {"ovia", "land", "heim", "mark", "stan",
                                     "berg", "ford", "dale", "wick", "holm"};
    static const char* attrs[] = {"capital", "river",    "peak",  "export", "festival",
                                  "dialect", "currency", "dish",  "relic",  "anthem"};
    KnowledgeTable t;
    t.seed = seed;
    t.params = params;
    util::Rng rng(util::mix64(seed ^ 0x70b1cull));
    for (int i = 0; i < n_topics; ++i) {
        std::string name = detail::topic_marker(size_t(i)) + suffixes[i % 10];
        t.topics.push_back(name);
        auto& fs = t.facts[name];
        for (int j = 0; j < facts_per_topic; ++j) {
            std::string attr = j < 10 ? attrs[j] : "trait" + std::to_string(j);
            fs.push_back(name + " " + attr + " " + detail::random_word(rng, 5));
        }
    }
    return t;
}

// ---- table file ----------------------------------------------------------------

inline nlohmann::json table_to_json(const KnowledgeTable& t) {
    nlohmann::json j;
    j["topics"] = t.topics;
    j["facts"] = t.facts;
    j["seed"] = t.seed;
    const ToyParams& p = t.params;
    j["params"] = {
        {"fact_base", p.fact_base},   {"fact_cap", p.fact_cap},
        {"fact_shots", p.fact_shots}, {"fact_pq", p.fact_pq},
        {"pq_weight", p.pq_weight},
        {"hedge_base", p.hedge_base}, {"hedge_slope", p.hedge_slope},
        {"hedge_floor", p.hedge_floor}, {"len_base", p.len_base},
        {"len_slope", p.len_slope},   {"len_jitter", p.len_jitter},
        {"fail_base", p.fail_base},   {"fail_slope", p.fail_slope},
        {"target_len", p.target_len}, {"max_items", p.max_items},
    };
    return j;
}

inline KnowledgeTable table_from_json(const nlohmann::json& j) {
    KnowledgeTable t;
    t.topics = j.at("topics").get<std::vector<std::string>>();
    t.facts = j.at("facts").get<std::map<std::string, std::vector<std::string>>>();
    t.seed = j.at("seed").get<uint64_t>();
    if (j.contains("params")) {
        const auto& p = j["params"];
        ToyParams& q = t.params;
        q.fact_base = p.value("fact_base", q.fact_base);
        q.fact_cap = p.value("fact_cap", q.fact_cap);
        q.fact_shots = p.value("fact_shots", q.fact_shots);
        q.fact_pq = p.value("fact_pq", q.fact_pq);
        q.pq_weight = p.value("pq_weight", q.pq_weight);
        q.hedge_base = p.value("hedge_base", q.hedge_base);
        q.hedge_slope = p.value("hedge_slope", q.hedge_slope);
        q.hedge_floor = p.value("hedge_floor", q.hedge_floor);
        q.len_base = p.value("len_base", q.len_base);
        q.len_slope = p.value("len_slope", q.len_slope);
        q.len_jitter = p.value("len_jitter", q.len_jitter);
        q.fail_base = p.value("fail_base", q.fail_base);
        q.fail_slope = p.value("fail_slope", q.fail_slope);
        q.target_len = p.value("target_len", q.target_len);
        q.max_items = p.value("max_items", q.max_items);
    }
    for (const auto& topic : t.topics)
        if (!t.facts.count(topic))
            throw std::runtime_error("table lists topic without facts: " + topic);
    return t;
}

// Presets used by the bundled pipelines:
//   default            — standard coefficients, quality correlates with length
//   length_decorrelated — all ranks share one length distribution, so response
//                         length carries no quality signal
//   noisy              — hedges and refusals injected at every rank, giving the
//                         keyword/length filters real work to do
inline KnowledgeTable make_preset(const std::string& name, int n_topics = 24,
                                  int facts_per_topic = 5, uint64_t seed = 7) {
    ToyParams p;
    if (name == "default") {
        // defaults as-is
    } else if (name == "length_decorrelated") {
        p.len_base = 4.0;
        p.len_slope = 0.0;
        p.len_jitter = 1.5;
    } else if (name == "noisy") {
        p.hedge_floor = 0.30;
        p.fail_base = 0.40;
        p.fail_slope = 0.04;
    } else {
        throw std::invalid_argument("unknown toy preset: " + name);
    }
    return make_table(n_topics, facts_per_topic, seed, p);
}

// ---- generator -----------------------------------------------------------------

struct ToyGenerator {
    core::GeneratorConfig cfg;

    int rank_sum() const { return cfg.capability + cfg.shots + cfg.prompt_quality; }

    // rank aggregate for the hedge/length/refusal curves; strictly increasing
    // in every coordinate, with prompt quality weighted hardest
    double weighted_rank(const ToyParams& p) const {
        return cfg.capability + cfg.shots + p.pq_weight * cfg.prompt_quality;
    }

    double p_fact(const ToyParams& p) const {
        double v = p.fact_base + p.fact_cap * cfg.capability +
                   p.fact_shots * cfg.shots + p.fact_pq * cfg.prompt_quality;
        return std::clamp(v, 0.05, 0.95);
    }
    double p_hedge(const ToyParams& p) const {
        double v = p.hedge_base - p.hedge_slope * weighted_rank(p);
        return std::clamp(std::max(v, p.hedge_floor), 0.0, 1.0);
    }
    double length_mean(const ToyParams& p) const {
        return p.len_base + p.len_slope * weighted_rank(p);
    }
    double p_fail(const ToyParams& p) const {
        return std::clamp(p.fail_base - p.fail_slope * weighted_rank(p), 0.0, 1.0);
    }
};

constexpr const char* kHedgePrefix = "well, ";
constexpr const char* kRefusal = "I don't know.";

inline std::string resolve_topic(const core::Query& q, const KnowledgeTable& t) {
    auto it = q.meta.find("topic");
    if (it != q.meta.end()) {
        if (!t.facts.count(it->second))
            throw std::invalid_argument("query names unknown topic: " + it->second);
        return it->second;
    }
    // fall back to the longest topic name appearing in the query text
    std::string best;
    for (const auto& topic : t.topics)
        if (q.text.find(topic) != std::string::npos && topic.size() > best.size())
            best = topic;
    if (best.empty())
        throw std::invalid_argument("query names no known topic: " + q.text);
    return best;
}

inline std::string find_topic_in(const std::string& text, const KnowledgeTable& t) {
    std::string best;
    size_t best_at = 0;
    for (const auto& topic : t.topics) {
        size_t at = text.rfind(topic);
        if (at == std::string::npos) continue;
        if (best.empty() || at > best_at || (at == best_at && topic.size() > best.size())) {
            best = topic;
            best_at = at;
        }
    }
    return best; // empty when nothing matches
}

// Ground-truth response quality:
//   0.7 * (fraction of the topic's facts present as substrings)
// + 0.2 * length adequacy (linear up to target_len)
// - 0.3 * hedge indicator, clipped to [0,1]
inline double oracle_quality(const core::Query& query, const std::string& response,
                             const KnowledgeTable& table) {
    const std::string topic = resolve_topic(query, table);
    const auto& fs = table.facts_of(topic);
    int hit = 0;
    for (const auto& f : fs)
        if (response.find(f) != std::string::npos) ++hit;
    double coverage = double(hit) / double(fs.size());
    double len_term = std::min(1.0, double(response.size()) / table.params.target_len);
    std::string low = util::to_lower(util::trim(response));
    bool hedged = low.rfind("well", 0) == 0 || low.rfind("i don't know", 0) == 0;
    double q = 0.7 * coverage + 0.2 * len_term - 0.3 * (hedged ? 1.0 : 0.0);
    return std::clamp(q, 0.0, 1.0);
}

// One response. Every stochastic decision draws from its own derived stream, so
// two generators sharing a seed make aligned decisions (common random numbers):
// raising p_fact can only turn distractors into facts, never the reverse.
inline std::string toy_generate(const ToyGenerator& gen, const core::Query& query,
                                const KnowledgeTable& table, uint64_t seed) {
    const ToyParams& P = table.params;
    const std::string topic = resolve_topic(query, table);
    const auto& fs = table.facts_of(topic);
    util::Rng root(seed);

    if (root.derive("fail").uniform() < gen.p_fail(P)) return kRefusal;

    bool hedged = root.derive("hedge").uniform() < gen.p_hedge(P);
    double want = gen.length_mean(P) + root.derive("len").normal() * P.len_jitter;
    int k = std::clamp(int(std::lround(want)), 1, P.max_items);

    std::string out = hedged ? kHedgePrefix : "";
    for (int i = 0; i < k; ++i) {
        bool is_fact = root.derive("item", uint64_t(i)).uniform() < gen.p_fact(P);
        if (is_fact) {
            out += fs[root.derive("pick", uint64_t(i)).below(fs.size())];
        } else {
            size_t other = root.derive("dtopic", uint64_t(i)).below(table.topics.size() - 1);
            // skip over the query's own topic
            size_t own = size_t(std::find(table.topics.begin(), table.topics.end(), topic) -
                                table.topics.begin());
            if (other >= own) ++other;
            const auto& dfs = table.facts_of(table.topics[other]);
            out += dfs[root.derive("dfact", uint64_t(i)).below(dfs.size())];
        }
        out += i + 1 < k ? "; " : ".";
    }
    return out;
}

// ---- queries -------------------------------------------------------------------

inline const std::vector<std::string>& query_templates() {
    static const std::vector<std::string> t = {
        "Tell me about {}.",          "What should I know about {}?",
        "Give me some facts on {}.",  "Describe {} for me.",
        "What is notable about {}?",  "Share what you know of {}.",
    };
    return t;
}

inline core::Query make_query(const KnowledgeTable& table, size_t topic_idx,
                              size_t template_idx, const std::string& id) {
    const std::string& topic = table.topics.at(topic_idx % table.topics.size());
    std::string tpl = query_templates()[template_idx % query_templates().size()];
    size_t slot = tpl.find("{}");
    tpl.replace(slot, 2, topic);
    core::Query q;
    q.id = id;
    q.text = tpl;
    q.meta["topic"] = topic;
    return q;
}

inline std::vector<core::Query> make_queries(const KnowledgeTable& table, int count,
                                             uint64_t seed, const std::string& id_prefix = "toy") {
    std::vector<core::Query> out;
    util::Rng rng(util::mix64(seed ^ 0x9e3779b9ull));
    for (int i = 0; i < count; ++i) {
        size_t topic_idx = rng.below(table.topics.size());
        size_t tpl_idx = rng.below(query_templates().size());
        char id[32];
        std::snprintf(id, sizeof id, "%s-%05d", id_prefix.c_str(), i);
        out.push_back(make_query(table, topic_idx, tpl_idx, id));
    }
    return out;
}

// Default generator lattice, a chain mirroring "bigger model, more shots,
// better prompt" with five named points.
inline std::vector<core::GeneratorConfig> default_lattice() {
    return {
        {"A", 3, 3, 3, 1}, {"B", 2, 3, 3, 2}, {"C", 1, 3, 3, 3},
        {"D", 1, 1, 3, 4}, {"E", 1, 1, 1, 5},
    };
}

// ---- backends ------------------------------------------------------------------

// Assistant-role backend: finds the topic in the prompt (the most recent
// mention wins for multi-turn contexts) and emits a generator response.
class ToyAssistantBackend : public genbackend::Backend {
public:
    ToyAssistantBackend(KnowledgeTable table, core::GeneratorConfig cfg)
        : table_(std::move(table)), gen_{std::move(cfg)} {}

    genbackend::GenResponse generate(const genbackend::GenRequest& req) override {
        req.validate();
        genbackend::GenResponse out;
        std::string topic = find_topic_in(req.prompt, table_);
        for (int i = 0; i < req.n; ++i) {
            genbackend::Completion c;
            if (topic.empty()) {
                c.text = kRefusal;
            } else {
                core::Query q;
                q.id = "ctx";
                q.text = req.prompt;
                q.meta["topic"] = topic;
                uint64_t s = util::Rng(req.seed).derive("toyasst", uint64_t(i)).seed();
                c.text = toy_generate(gen_, q, table_, s);
            }
            out.completions.push_back(std::move(c));
        }
        return out;
    }

    std::string name() const override { return "toy:" + gen_.cfg.name; }

    const ToyGenerator& generator() const { return gen_; }
    const KnowledgeTable& table() const { return table_; }

private:
    KnowledgeTable table_;
    ToyGenerator gen_;
};

// User-role backend: produces the follow-up human turn about the same topic.
class ToyUserBackend : public genbackend::Backend {
public:
    explicit ToyUserBackend(KnowledgeTable table) : table_(std::move(table)) {}

    genbackend::GenResponse generate(const genbackend::GenRequest& req) override {
        req.validate();
        static const std::vector<std::string> followups = {
            "Tell me more about {}.", "What else is there about {}?",
            "Any other facts on {}?", "Go on about {}.",
        };
        genbackend::GenResponse out;
        std::string topic = find_topic_in(req.prompt, table_);
        if (topic.empty()) topic = table_.topics.front();
        for (int i = 0; i < req.n; ++i) {
            util::Rng rng = util::Rng(req.seed).derive("toyuser", uint64_t(i));
            std::string tpl = followups[rng.below(followups.size())];
            tpl.replace(tpl.find("{}"), 2, topic);
            out.completions.push_back({std::move(tpl), std::nullopt});
        }
        return out;
    }

    std::string name() const override { return "toy:user"; }

private:
    KnowledgeTable table_;
};

// Query-mining backend: emits one query-shaped line per completion, the toy
// stand-in for few-shot query bootstrapping off a real model server.
class ToyQueryMinerBackend : public genbackend::Backend {
public:
    explicit ToyQueryMinerBackend(KnowledgeTable table, double duplicate_rate = 0.15)
        : table_(std::move(table)), duplicate_rate_(duplicate_rate) {}

    genbackend::GenResponse generate(const genbackend::GenRequest& req) override {
        req.validate();
        genbackend::GenResponse out;
        for (int i = 0; i < req.n; ++i) {
            util::Rng rng = util::Rng(req.seed).derive("toymine", uint64_t(i));
            size_t topic_idx;
            if (rng.uniform() < duplicate_rate_) {
                topic_idx = 0; // recurring favorite, exercises the dedup path
            } else {
                topic_idx = rng.below(table_.topics.size());
            }
            core::Query q = make_query(table_, topic_idx, rng.below(query_templates().size()),
                                       "mined");
            out.completions.push_back({q.text + "\n", std::nullopt});
        }
        return out;
    }

    std::string name() const override { return "toy:miner"; }

private:
    KnowledgeTable table_;
    double duplicate_rate_;
};

} // namespace synthfeed::toyworld

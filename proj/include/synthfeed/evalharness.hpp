#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "synthfeed/backend.hpp"
#include "synthfeed/jsonl.hpp"
#include "synthfeed/reward_model.hpp"
#include "synthfeed/synthcmp.hpp"
#include "synthfeed/tinylm.hpp"
#include "synthfeed/toyworld.hpp"
#include "synthfeed/types.hpp"
#include "synthfeed/util.hpp"

namespace synthfeed::evalharness {

// ---- reports -------------------------------------------------------------------

struct EvalReport {
    std::string name;
    std::map<std::string, double> metrics; // ordered: serialization is deterministic
    int64_t n = 0;                         // sample count backing the metrics
    std::string config_fingerprint;        // hex digest of the evaluation config
    uint64_t seed = 0;

    nlohmann::json to_json() const {
        nlohmann::json m = nlohmann::json::object();
        for (const auto& [k, v] : metrics) m[k] = v;
        return {{"name", name},
                {"metrics", m},
                {"n", n},
                {"config_fingerprint", config_fingerprint},
                {"seed", seed}};
    }

    static EvalReport from_json(const nlohmann::json& j) {
        EvalReport r;
        r.name = j.at("name").get<std::string>();
        for (auto it = j.at("metrics").begin(); it != j.at("metrics").end(); ++it)
            r.metrics[it.key()] = it.value().get<double>();
        r.n = j.at("n").get<int64_t>();
        r.config_fingerprint = j.at("config_fingerprint").get<std::string>();
        r.seed = j.at("seed").get<uint64_t>();
        return r;
    }

    std::string to_table() const {
        size_t w = 6;
        for (const auto& [k, _] : metrics) w = std::max(w, k.size());
        char buf[128];
        std::snprintf(buf, sizeof buf, "== %s ==  n=%lld seed=%llu config=%s\n",
                      name.c_str(), (long long)n, (unsigned long long)seed,
                      config_fingerprint.c_str());
        std::string out = buf;
        for (const auto& [k, v] : metrics) {
            std::snprintf(buf, sizeof buf, "%-*s  %.6f\n", int(w), k.c_str(), v);
            out += buf;
        }
        return out;
    }
};

inline std::string fingerprint_of(const nlohmann::json& cfg) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  (unsigned long long)util::fnv1a64(cfg.dump()));
    return buf;
}

// ---- pairwise-accuracy baselines --------------------------------------------------

enum class BaselineKind { random, lengthy };

inline BaselineKind baseline_from(const std::string& s) {
    if (s == "random") return BaselineKind::random;
    if (s == "lengthy") return BaselineKind::lengthy;
    throw std::invalid_argument("unknown baseline kind: " + s);
}

// random guessing is exactly 1/2 by symmetry; the lengthy classifier always
// picks the longer response (character count), length ties scored incorrect
inline double baseline_accuracy(const std::vector<core::ComparisonPair>& pairs,
                                BaselineKind kind) {
    if (pairs.empty()) throw std::invalid_argument("baseline_accuracy on empty set");
    if (kind == BaselineKind::random) return 0.5;
    size_t hits = 0;
    for (const auto& p : pairs)
        if (p.chosen.size() > p.rejected.size()) ++hits;
    return double(hits) / double(pairs.size());
}

inline EvalReport rm_accuracy_report(const rm::RewardModel& model,
                                     const std::vector<core::ComparisonPair>& pairs,
                                     int jobs = 1, uint64_t seed = 0) {
    EvalReport r;
    r.name = "rm-accuracy";
    r.n = int64_t(pairs.size());
    r.seed = seed;
    r.metrics["accuracy"] = rm::pairwise_accuracy(model, pairs, jobs);
    r.metrics["random_baseline"] = baseline_accuracy(pairs, BaselineKind::random);
    r.metrics["lengthy_baseline"] = baseline_accuracy(pairs, BaselineKind::lengthy);
    r.config_fingerprint = fingerprint_of({{"pooling", rm::pooling_name(model.pooling)},
                                           {"pairs", pairs.size()}});
    return r;
}

// ---- oracle-labeled comparison pairs ----------------------------------------------
//
// Ground-truth preference data for the toy world: sample one response per
// generator config per query, score with the quality oracle, and pair up
// responses whose scores differ by more than min_gap. Serves as held-out
// validation data and as the out-of-pipeline training set for the agreement
// filter model.

struct OraclePairOptions {
    double min_gap = 0.08; // required oracle-quality gap for a labeled pair
    core::SamplingParams sampling;
};

inline std::vector<core::ComparisonPair> oracle_labeled_pairs(
    const std::vector<core::Query>& queries,
    const std::vector<core::GeneratorConfig>& configs,
    const synthcmp::BackendMap& backends, const toyworld::KnowledgeTable& table,
    const core::RunConfig& run, const OraclePairOptions& opt = {}) {
    if (queries.empty()) throw std::invalid_argument("oracle_labeled_pairs: no queries");
    core::validate_config_set(configs);
    util::Rng stage = run.stage_rng("oracle-pairs");

    std::vector<std::vector<core::ComparisonPair>> slots(queries.size());
    util::parallel_for(queries.size(), run.jobs, [&](size_t qi) {
        const core::Query& q = queries[qi];
        std::vector<std::pair<double, std::string>> scored;
        for (const auto& cfg : configs) {
            auto it = backends.find(cfg.name);
            if (it == backends.end())
                throw std::invalid_argument("no backend for config " + cfg.name);
            genbackend::GenRequest req = genbackend::GenRequest::from(
                synthcmp::generation_prompt(q), opt.sampling,
                stage.derive(q.id, cfg.name).seed(), {"\nHuman:", "\n\nHuman:"});
            genbackend::GenResponse resp = it->second->generate(req);
            for (const auto& c : resp.completions)
                scored.emplace_back(toyworld::oracle_quality(q, c.text, table), c.text);
        }
        for (size_t i = 0; i < scored.size(); ++i) {
            for (size_t j = i + 1; j < scored.size(); ++j) {
                const auto& hi = scored[i].first >= scored[j].first ? scored[i] : scored[j];
                const auto& lo = scored[i].first >= scored[j].first ? scored[j] : scored[i];
                if (hi.first - lo.first <= opt.min_gap) continue;
                core::ComparisonPair p;
                p.query = q;
                p.chosen = hi.second;
                p.rejected = lo.second;
                p.chosen_config = {"oracle-hi", 1, 0, 1, 1};
                p.rejected_config = {"oracle-lo", 1, 0, 1, 2};
                p.validate();
                slots[qi].push_back(std::move(p));
            }
        }
    });
    std::vector<core::ComparisonPair> out;
    for (auto& s : slots)
        for (auto& p : s) out.push_back(std::move(p));
    return out;
}

// ---- post-validation ablation ------------------------------------------------------

struct AblationOptions {
    std::vector<std::string> arms = {"full", "no_hf", "no_asis"};
    rm::RmTrainConfig rm_cfg;        // per-arm reward-model training
    rm::RmTrainConfig asis_cfg;      // agreement-filter model training
    OraclePairOptions oracle;        // labeled-pair construction
    synthcmp::HeuristicFilterConfig hf;
    double asis_frac = 0.25;  // share of queries that feed the agreement model
    double valid_frac = 0.25; // share held out for oracle-labeled validation
    genbackend::LmDims dims;
};

// Trains one reward model per arm of the filtering pipeline (identical init,
// identical training config; only the dataset differs) and scores each on a
// shared set of oracle-labeled validation pairs from held-out queries.
inline EvalReport ablation_run(const std::vector<core::Query>& queries,
                               const std::vector<core::GeneratorConfig>& configs,
                               const synthcmp::BackendMap& backends,
                               const toyworld::KnowledgeTable& table,
                               const core::RunConfig& run,
                               const AblationOptions& opt = {}) {
    if (opt.arms.empty()) throw std::invalid_argument("ablation_run: no arms");
    const size_t n_asis = size_t(double(queries.size()) * opt.asis_frac);
    const size_t n_valid = size_t(double(queries.size()) * opt.valid_frac);
    if (n_asis == 0 || n_valid == 0 || n_asis + n_valid >= queries.size())
        throw std::invalid_argument("ablation_run: too few queries to split");
    std::vector<core::Query> asis_q(queries.begin(), queries.begin() + ptrdiff_t(n_asis));
    std::vector<core::Query> valid_q(queries.begin() + ptrdiff_t(n_asis),
                                     queries.begin() + ptrdiff_t(n_asis + n_valid));
    std::vector<core::Query> train_q(queries.begin() + ptrdiff_t(n_asis + n_valid),
                                     queries.end());

    std::vector<core::ComparisonPair> asis_pairs =
        oracle_labeled_pairs(asis_q, configs, backends, table, run, opt.oracle);
    std::vector<core::ComparisonPair> valid_pairs =
        oracle_labeled_pairs(valid_q, configs, backends, table, run, opt.oracle);
    if (valid_pairs.empty())
        throw std::runtime_error("ablation_run: no validation pairs survived the gap rule");

    rm::RmTrainConfig asis_cfg = opt.asis_cfg;
    asis_cfg.seed = run.stage_rng("ablation-asis").seed();
    asis_cfg.jobs = run.jobs;
    rm::RewardModel asis = rm::train_asis_rm(
        asis_pairs, genbackend::TinyLm(opt.dims, run.stage_rng("ablation-asis-init").seed()),
        asis_cfg);

    EvalReport r;
    r.name = "ablation";
    r.n = int64_t(valid_pairs.size());
    r.seed = run.seed;
    const uint64_t rm_init_seed = run.stage_rng("ablation-rm-init").seed();
    for (const std::string& arm : opt.arms) {
        synthcmp::BuildOptions bopt;
        bopt.hf = opt.hf;
        bopt.jobs = run.jobs;
        if (arm == "full") {
            bopt.use_hf = true;
            bopt.use_asis = true;
        } else if (arm == "no_hf") {
            bopt.use_hf = false;
            bopt.use_asis = true;
        } else if (arm == "no_asis") {
            bopt.use_hf = true;
            bopt.use_asis = false;
        } else {
            throw std::invalid_argument("unknown ablation arm: " + arm);
        }
        synthcmp::BuildResult built = synthcmp::build_comparison_dataset(
            train_q, configs, backends, bopt.use_asis ? &asis : nullptr, run, bopt);
        if (built.pairs.empty())
            throw std::runtime_error("ablation arm " + arm + " produced no pairs");
        rm::RewardModel model(genbackend::TinyLm(opt.dims, rm_init_seed));
        rm::RmTrainConfig cfg = opt.rm_cfg;
        cfg.seed = run.stage_rng("ablation-rm").seed();
        cfg.jobs = run.jobs;
        rm::train_rm(model, built.pairs, valid_pairs, cfg);
        r.metrics["accuracy_" + arm] = rm::pairwise_accuracy(model, valid_pairs, run.jobs);
        r.metrics["pairs_" + arm] = double(built.pairs.size());
    }
    r.metrics["lengthy_baseline"] = baseline_accuracy(valid_pairs, BaselineKind::lengthy);
    r.metrics["random_baseline"] = 0.5;
    nlohmann::json fp{{"arms", opt.arms},
                      {"rm_epochs", opt.rm_cfg.epochs},
                      {"rm_lr", opt.rm_cfg.lr},
                      {"min_gap", opt.oracle.min_gap},
                      {"queries", queries.size()}};
    r.config_fingerprint = fingerprint_of(fp);
    return r;
}

// ---- best-of-N sweep ---------------------------------------------------------------
//
// Single-turn best-of-N with common random numbers: candidate i for a query is
// sampled from the same derived seed regardless of N, so the candidate set for
// a larger N is a superset of the set for a smaller N and the winner's score
// is a running max — mean score is monotone in N exactly, not just on average.

inline EvalReport bon_sweep(const std::vector<core::Query>& queries,
                            genbackend::Backend& backend, const rm::RewardModel& reward,
                            const toyworld::KnowledgeTable& table,
                            const core::RunConfig& run,
                            std::vector<int> ns = {1, 2, 4, 8}) {
    if (queries.empty()) throw std::invalid_argument("bon_sweep: no queries");
    if (ns.empty()) throw std::invalid_argument("bon_sweep: no N values");
    for (int n : ns)
        if (n < 1) throw std::invalid_argument("bon_sweep: N must be positive");
    std::sort(ns.begin(), ns.end());
    ns.erase(std::unique(ns.begin(), ns.end()), ns.end());
    const int max_n = ns.back();
    util::Rng stage = run.stage_rng("bon");

    struct PerQuery {
        std::vector<double> rm_by_n, oracle_by_n;
    };
    std::vector<PerQuery> rows(queries.size());
    util::parallel_for(queries.size(), run.jobs, [&](size_t qi) {
        const core::Query& q = queries[qi];
        std::vector<std::string> cands(static_cast<size_t>(max_n));
        std::vector<double> scores(static_cast<size_t>(max_n));
        for (int c = 0; c < max_n; ++c) {
            genbackend::GenRequest req = genbackend::GenRequest::from(
                synthcmp::generation_prompt(q), run.sampling,
                stage.derive(q.id, "cand", uint64_t(c)).seed(),
                {"\nHuman:", "\n\nHuman:"});
            cands[size_t(c)] = backend.generate(req).completions.at(0).text;
            scores[size_t(c)] = reward.score(q.text, cands[size_t(c)]);
        }
        for (int n : ns) {
            int best = 0;
            for (int c = 1; c < n; ++c)
                if (scores[size_t(c)] > scores[size_t(best)]) best = c;
            rows[qi].rm_by_n.push_back(scores[size_t(best)]);
            rows[qi].oracle_by_n.push_back(
                toyworld::oracle_quality(q, cands[size_t(best)], table));
        }
    });

    EvalReport r;
    r.name = "bon-sweep";
    r.n = int64_t(queries.size());
    r.seed = run.seed;
    for (size_t k = 0; k < ns.size(); ++k) {
        double rm_sum = 0, oq_sum = 0;
        for (const auto& row : rows) {
            rm_sum += row.rm_by_n[k];
            oq_sum += row.oracle_by_n[k];
        }
        char key[48];
        std::snprintf(key, sizeof key, "rm_score_n%d", ns[k]);
        r.metrics[key] = rm_sum / double(rows.size());
        std::snprintf(key, sizeof key, "oracle_n%d", ns[k]);
        r.metrics[key] = oq_sum / double(rows.size());
    }
    // paired one-sided test: does the largest N beat N = smallest on oracle quality?
    if (ns.size() >= 2) {
        std::vector<double> diffs(rows.size());
        for (size_t i = 0; i < rows.size(); ++i)
            diffs[i] = rows[i].oracle_by_n.back() - rows[i].oracle_by_n.front();
        r.metrics["oracle_gain_p_value"] = util::paired_one_sided_p(diffs);
    }
    nlohmann::json fp{{"ns", ns}, {"queries", queries.size()},
                      {"backend", backend.name()}};
    r.config_fingerprint = fingerprint_of(fp);
    return r;
}

// mean oracle quality over a demonstration's assistant turns; the topic is
// read from the opening human turn
inline double demo_oracle_quality(const core::Demonstration& demo,
                                  const toyworld::KnowledgeTable& table) {
    if (demo.conversation.turns.empty())
        throw std::invalid_argument("demo_oracle_quality: empty conversation");
    std::string topic = toyworld::find_topic_in(demo.conversation.turns[0].text, table);
    if (topic.empty())
        throw std::invalid_argument("demo_oracle_quality: no known topic in opening turn");
    core::Query q;
    q.id = "demo";
    q.text = demo.conversation.turns[0].text;
    q.meta["topic"] = topic;
    double sum = 0;
    int count = 0;
    for (const auto& t : demo.conversation.turns) {
        if (t.speaker != core::Speaker::assistant) continue;
        sum += toyworld::oracle_quality(q, t.text, table);
        ++count;
    }
    if (count == 0) throw std::invalid_argument("demo_oracle_quality: no assistant turns");
    return sum / double(count);
}

// ---- likelihood-based multiple choice ----------------------------------------------

struct McItem {
    std::string prompt;
    std::vector<std::string> options;
    int answer_index = 0;

    void validate() const {
        if (options.empty()) throw std::invalid_argument("mc item has no options");
        if (answer_index < 0 || answer_index >= int(options.size()))
            throw std::invalid_argument("mc answer_index out of range");
        for (const auto& o : options)
            if (o.empty()) throw std::invalid_argument("mc item has an empty option");
    }

    nlohmann::json to_json() const {
        return {{"prompt", prompt}, {"options", options}, {"answer_index", answer_index}};
    }

    static McItem from_json(const nlohmann::json& j) {
        McItem it;
        it.prompt = j.at("prompt").get<std::string>();
        it.options = j.at("options").get<std::vector<std::string>>();
        it.answer_index = j.at("answer_index").get<int>();
        it.validate();
        return it;
    }
};

inline std::vector<McItem> read_mc_items(const std::string& path) {
    std::vector<McItem> items;
    size_t lineno = 0;
    for (const auto& line : core::read_lines(path)) {
        ++lineno;
        try {
            items.push_back(McItem::from_json(nlohmann::json::parse(line)));
        } catch (const std::exception& e) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (items.empty()) throw std::runtime_error(path + ": no mc items");
    return items;
}

// predicted option = argmax of option log-likelihood, divided by option byte
// length when length_normalize is set (scaling all scores by the same positive
// constant cannot change the argmax); ties resolve to the lowest index
inline double mc_eval(const genbackend::TinyLm& policy, const std::vector<McItem>& items,
                      bool length_normalize = true, int jobs = 1) {
    if (items.empty()) throw std::invalid_argument("mc_eval: no items");
    std::vector<char> correct(items.size(), 0);
    util::parallel_for(items.size(), jobs, [&](size_t i) {
        const McItem& it = items[i];
        it.validate();
        int best = 0;
        double best_score = -1e300;
        for (size_t o = 0; o < it.options.size(); ++o) {
            double lp = policy.log_prob(it.prompt, it.options[o]);
            if (length_normalize) lp /= double(it.options[o].size());
            if (lp > best_score) {
                best_score = lp;
                best = int(o);
            }
        }
        correct[i] = best == it.answer_index ? 1 : 0;
    });
    size_t hits = 0;
    for (char c : correct) hits += size_t(c);
    return double(hits) / double(items.size());
}

// ---- learning-curve digest -----------------------------------------------------------

// Digest of a policy-optimization metrics file (one JSON object per line):
// first- vs last-decile mean reward, the gain in units of the reward series'
// standard deviation, final mean KL, and the maximum clip fraction.
inline EvalReport ppo_curve_report(const std::string& metrics_path) {
    std::ifstream in(metrics_path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open metrics file: " + metrics_path);
    std::vector<double> reward, kl, clip;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        try {
            nlohmann::json j = nlohmann::json::parse(line);
            reward.push_back(j.at("mean_reward").get<double>());
            kl.push_back(j.at("mean_kl").get<double>());
            clip.push_back(j.at("clip_frac").get<double>());
        } catch (const std::exception& e) {
            throw std::runtime_error(metrics_path + ":" + std::to_string(lineno) + ": " +
                                     e.what());
        }
    }
    if (reward.empty())
        throw std::runtime_error(metrics_path + ": no metrics records");

    const size_t n = reward.size();
    const size_t decile = std::max<size_t>(1, n / 10);
    auto mean_range = [&](size_t b, size_t e) {
        double s = 0;
        for (size_t i = b; i < e; ++i) s += reward[i];
        return s / double(e - b);
    };
    EvalReport r;
    r.name = "ppo-curve";
    r.n = int64_t(n);
    r.metrics["first_decile_reward"] = mean_range(0, decile);
    r.metrics["last_decile_reward"] = mean_range(n - decile, n);
    r.metrics["reward_gain"] =
        r.metrics["last_decile_reward"] - r.metrics["first_decile_reward"];
    r.metrics["reward_sd"] = util::pop_std(reward);
    r.metrics["gain_in_sd"] = r.metrics["reward_sd"] > 0
                                  ? r.metrics["reward_gain"] / r.metrics["reward_sd"]
                                  : 0.0;
    r.metrics["final_mean_kl"] = kl.back();
    r.metrics["max_clip_frac"] = *std::max_element(clip.begin(), clip.end());
    r.config_fingerprint = fingerprint_of({{"file_records", n}});
    return r;
}

} // namespace synthfeed::evalharness

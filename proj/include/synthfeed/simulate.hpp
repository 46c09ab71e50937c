#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "synthfeed/backend.hpp"
#include "synthfeed/reward_model.hpp"
#include "synthfeed/types.hpp"
#include "synthfeed/util.hpp"

namespace synthfeed::simulate {

struct SimConfig {
    int max_turns = 2;  // assistant turns per conversation
    int best_of_n = 4;  // 1 = plain self-play
    genbackend::Backend* assistant_backend = nullptr;
    genbackend::Backend* user_backend = nullptr;
    const rm::RewardModel* reward = nullptr;
    std::vector<std::string> assistant_stop = {"\nHuman:", "\n\nHuman:"};
    std::vector<std::string> user_stop = {"\nAssistant:", "\n\nAssistant:"};
    int retry_budget = 3; // attempts per assistant turn before giving up

    void validate() const {
        if (max_turns < 1) throw std::invalid_argument("max_turns must be >= 1");
        if (best_of_n < 1) throw std::invalid_argument("best_of_n must be >= 1");
        if (!assistant_backend || !user_backend)
            throw std::invalid_argument("both role backends are required");
        if ((best_of_n > 1) != (reward != nullptr))
            throw std::invalid_argument(
                "a reward model is required exactly when best_of_n > 1");
    }
};

inline std::string render_conversation(const core::Conversation& conv) {
    std::string out;
    for (size_t i = 0; i < conv.turns.size(); ++i) {
        if (i) out += "\n\n";
        out += conv.turns[i].speaker == core::Speaker::human ? "Human: " : "Assistant: ";
        out += conv.turns[i].text;
    }
    return out;
}

struct CandidateRecord {
    std::string query_id;
    int turn = 0;
    int candidate = 0;
    double score = 0.0;
    bool selected = false;
    std::string text;
};

class SimulateError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string gen_once(genbackend::Backend& be, const std::string& prompt,
                            const core::SamplingParams& sp, uint64_t seed,
                            const std::vector<std::string>& stop) {
    genbackend::GenRequest req = genbackend::GenRequest::from(prompt, sp, seed, stop);
    genbackend::GenResponse resp = be.generate(req);
    return util::trim(resp.completions.at(0).text);
}

} // namespace detail

// One conversation: the query opens as the human turn, the assistant and user
// role models alternate until max_turns assistant turns exist. With
// best_of_n > 1 each assistant turn samples N candidates (seeds derived
// independently of N, so candidate sets nest across different N) and keeps the
// reward argmax, ties to the lowest index.
inline core::Demonstration simulate_one(const core::Query& query, const SimConfig& cfg,
                                        const core::RunConfig& run,
                                        std::vector<CandidateRecord>* candidate_log = nullptr) {
    cfg.validate();
    util::Rng qrng = run.stage_rng("simulate").derive(query.id);

    core::Conversation conv;
    conv.append(core::Speaker::human, query.text);
    std::vector<double> winning_scores;

    for (int turn = 0; turn < cfg.max_turns; ++turn) {
        const std::string context = render_conversation(conv);
        const std::string prompt = context + "\n\nAssistant: ";

        std::string best_text;
        double best_score = 0.0;
        int best_idx = -1;
        for (int cand = 0; cand < cfg.best_of_n; ++cand) {
            std::string text;
            for (int attempt = 0; attempt < cfg.retry_budget && text.empty(); ++attempt) {
                uint64_t seed = qrng.derive("turn", uint64_t(turn), "cand", uint64_t(cand),
                                            "retry", uint64_t(attempt))
                                    .seed();
                text = detail::gen_once(*cfg.assistant_backend, prompt, run.sampling, seed,
                                        cfg.assistant_stop);
            }
            if (text.empty()) continue;
            double score = 0.0;
            if (cfg.best_of_n > 1)
                score = cfg.reward->score_context(context + "\n\nAssistant: " + text);
            if (candidate_log)
                candidate_log->push_back({query.id, turn, cand, score, false, text});
            if (best_idx < 0 || score > best_score) {
                best_score = score;
                best_text = text;
                best_idx = cand;
            }
        }
        if (best_idx < 0) {
            // this assistant turn never materialized: truncate to the last
            // complete exchange if one exists, otherwise give up on the query
            if (turn > 0) {
                conv.turns.pop_back(); // trailing human follow-up
                break;
            }
            throw SimulateError("no assistant response for query " + query.id);
        }
        if (candidate_log) {
            for (auto it = candidate_log->rbegin(); it != candidate_log->rend(); ++it) {
                if (it->query_id == query.id && it->turn == turn &&
                    it->candidate == best_idx) {
                    it->selected = true;
                    break;
                }
            }
        }
        conv.append(core::Speaker::assistant, best_text);
        if (cfg.best_of_n > 1) winning_scores.push_back(best_score);

        if (turn + 1 < cfg.max_turns) {
            uint64_t seed = qrng.derive("user", uint64_t(turn)).seed();
            std::string follow =
                detail::gen_once(*cfg.user_backend, render_conversation(conv) + "\n\nHuman: ",
                                 run.sampling, seed, cfg.user_stop);
            if (follow.empty()) break; // user model ended the conversation early
            conv.append(core::Speaker::human, follow);
        }
    }

    if (!conv.turns.empty() && conv.turns.back().speaker == core::Speaker::human)
        conv.turns.pop_back();

    core::Demonstration demo;
    demo.conversation = std::move(conv);
    demo.source = cfg.best_of_n > 1 ? core::DemoSource::rmsp : core::DemoSource::self_play;
    if (cfg.best_of_n > 1) demo.rm_scores = std::move(winning_scores);
    demo.validate();
    return demo;
}

inline core::Demonstration self_play(const core::Query& query, const SimConfig& cfg,
                                     const core::RunConfig& run) {
    if (cfg.best_of_n != 1)
        throw std::invalid_argument("self_play requires best_of_n == 1");
    return simulate_one(query, cfg, run);
}

inline core::Demonstration rmsp(const core::Query& query, const SimConfig& cfg,
                                const core::RunConfig& run,
                                std::vector<CandidateRecord>* candidate_log = nullptr) {
    if (cfg.best_of_n < 2)
        throw std::invalid_argument("rmsp requires best_of_n > 1");
    return simulate_one(query, cfg, run, candidate_log);
}

struct DemoBuildResult {
    std::vector<core::Demonstration> demos;
    std::vector<std::pair<std::string, std::string>> failures; // query id, reason
    std::vector<CandidateRecord> candidates;                   // when logging enabled
};

inline DemoBuildResult build_demo_dataset(const std::vector<core::Query>& queries,
                                          const SimConfig& cfg, const core::RunConfig& run,
                                          bool log_candidates = false) {
    cfg.validate();
    struct Slot {
        std::optional<core::Demonstration> demo;
        std::string error;
        std::vector<CandidateRecord> cands;
    };
    std::vector<Slot> slots(queries.size());
    util::parallel_for(queries.size(), run.jobs, [&](size_t i) {
        try {
            slots[i].demo = simulate_one(queries[i], cfg, run,
                                         log_candidates ? &slots[i].cands : nullptr);
        } catch (const std::exception& e) {
            slots[i].error = e.what();
        }
    });
    DemoBuildResult out;
    for (size_t i = 0; i < queries.size(); ++i) {
        if (slots[i].demo) {
            out.demos.push_back(std::move(*slots[i].demo));
            for (auto& c : slots[i].cands) out.candidates.push_back(std::move(c));
        } else {
            out.failures.emplace_back(queries[i].id, slots[i].error);
        }
    }
    return out;
}

} // namespace synthfeed::simulate

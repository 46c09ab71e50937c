#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "synthfeed/backend.hpp"
#include "synthfeed/checkpoint.hpp"
#include "synthfeed/reward_model.hpp"
#include "synthfeed/tinylm.hpp"
#include "synthfeed/util.hpp"

namespace synthfeed::policytrain {

struct PpoConfig {
    int episodes = 800;       // full-scale reference: 80,000
    int prompts = 200;        // 20,000
    int batch = 32;           // 512
    int minibatch = 8;        // 32
    int inner_epochs = 4;
    int rollout_max_tokens = 128;
    double sample_temperature = 1.0;
    double clip_ratio = 0.2;
    double discount = 1.0;    // gamma
    double kl_coeff = 0.05;   // lambda
    double lr = 3e-4;         // reference: 1e-6
    double min_lr_frac = 0.8; // cosine floor, mirrors 1e-6 -> 8e-7
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.95;
    bool reward_normalization = false; // kept off: raw scores feed the advantages
    double gae_lambda = 0.95;
    double value_loss_coeff = 0.5;
    bool kl_per_sequence = false; // alternative: whole KL folded into the last step
    uint64_t seed = 0;
    int jobs = 1;

    void validate() const {
        if (episodes < 0 || prompts < 1 || batch < 1 || minibatch < 1 ||
            inner_epochs < 1 || rollout_max_tokens < 1)
            throw std::invalid_argument("invalid PPO counts");
        if (!(clip_ratio > 0.0 && clip_ratio < 1.0))
            throw std::invalid_argument("clip_ratio must be in (0,1)");
        if (kl_coeff < 0.0) throw std::invalid_argument("kl_coeff must be >= 0");
        if (batch % minibatch != 0)
            throw std::invalid_argument("minibatch must divide batch");
        if (sample_temperature <= 0.0)
            throw std::invalid_argument("sample_temperature must be positive");
        if (discount < 0.0 || discount > 1.0 || gae_lambda < 0.0 || gae_lambda > 1.0)
            throw std::invalid_argument("discount/gae_lambda must be in [0,1]");
    }
};

inline PpoConfig reference_ppo_config() {
    PpoConfig c;
    c.episodes = 80000;
    c.prompts = 20000;
    c.batch = 512;
    c.minibatch = 32;
    c.lr = 1e-6;
    c.min_lr_frac = 0.8;
    return c;
}

// policy backbone plus a scalar value head over final states
struct PolicyValue {
    genbackend::TinyLm lm;
    std::vector<double> vhead; // embed weights + bias

    PolicyValue() = default;
    explicit PolicyValue(genbackend::TinyLm m)
        : lm(std::move(m)), vhead(size_t(lm.dims.embed) + 1, 0.0) {}

    double value_at(const genbackend::TinyLm::Cache& c, int t) const {
        const int dm = lm.dims.embed;
        double v = vhead[size_t(dm)];
        for (int i = 0; i < dm; ++i) v += vhead[size_t(i)] * c.nf[size_t(t) * dm + i];
        return v;
    }
};

inline void save_policy(const PolicyValue& p, const std::string& path) {
    genbackend::ckpt::Blob b;
    b.kind = genbackend::ckpt::Kind::policy_value;
    b.dims = p.lm.dims;
    b.backbone = p.lm.params;
    b.head = p.vhead;
    genbackend::ckpt::save(b, path);
}

inline PolicyValue load_policy(const std::string& path) {
    genbackend::ckpt::Blob b = genbackend::ckpt::load(path);
    genbackend::TinyLm lm(b.dims, 0);
    if (b.backbone.size() != lm.param_count())
        throw std::runtime_error(path + ": parameter count does not match dimensions");
    lm.params = std::move(b.backbone);
    PolicyValue p(std::move(lm));
    if (b.kind == genbackend::ckpt::Kind::policy_value) {
        if (b.head.size() != p.vhead.size())
            throw std::runtime_error(path + ": value-head size mismatch");
        p.vhead = b.head;
    } else if (b.kind != genbackend::ckpt::Kind::lm) {
        throw std::runtime_error(path + ": not a policy checkpoint");
    }
    return p;
}

// one sampled response with everything the update needs
struct Episode {
    std::string prompt;              // raw query text
    std::vector<int> prompt_tokens;  // BOS + rendered prompt bytes
    std::vector<int> actions;        // sampled tokens (may end with EOS)
    std::vector<double> logp_pi;     // per action, under the sampling policy
    std::vector<double> logp_ref;    // per action, under the frozen reference
    std::vector<double> kl;          // logp_pi - logp_ref per action
    double reward = 0.0;             // terminal r(x, y), unnormalized
    std::string text;                // decoded response
};

inline std::string ppo_prompt(const std::string& query) {
    return "Human: " + query + "\n\nAssistant: ";
}

// Sample one episode at full support (no nucleus truncation) so the stored
// log-probs are the exact sampling distribution.
inline Episode sample_episode(const PolicyValue& policy, const genbackend::TinyLm& ref,
                              const std::string& query, const PpoConfig& cfg,
                              uint64_t seed) {
    Episode ep;
    ep.prompt = query;
    ep.prompt_tokens = genbackend::TinyLm::tokens_of(ppo_prompt(query), true);
    const int budget = policy.lm.dims.max_seq - 1;
    if (int(ep.prompt_tokens.size()) > budget)
        ep.prompt_tokens.erase(ep.prompt_tokens.begin(),
                               ep.prompt_tokens.end() - budget);

    genbackend::TinyLm::DecodeState pi_st, ref_st;
    std::vector<double> logits, ref_logits;
    for (int tok : ep.prompt_tokens) {
        logits = policy.lm.decode_step(pi_st, tok);
        ref_logits = ref.decode_step(ref_st, tok);
    }
    util::Rng rng(seed);
    for (int t = 0; t < cfg.rollout_max_tokens; ++t) {
        if (pi_st.T >= policy.lm.dims.max_seq) break;
        int a = genbackend::sample_token(logits, 1.0, cfg.sample_temperature, rng);
        std::vector<double> p = genbackend::TinyLm::softmax(logits);
        std::vector<double> q = genbackend::TinyLm::softmax(ref_logits);
        ep.actions.push_back(a);
        ep.logp_pi.push_back(std::log(std::max(p[size_t(a)], 1e-300)));
        ep.logp_ref.push_back(std::log(std::max(q[size_t(a)], 1e-300)));
        ep.kl.push_back(ep.logp_pi.back() - ep.logp_ref.back());
        if (a == genbackend::kEos || a == genbackend::kBos || a == genbackend::kPad) break;
        ep.text.push_back(char(uint8_t(a)));
        if (t + 1 < cfg.rollout_max_tokens && pi_st.T < policy.lm.dims.max_seq) {
            logits = policy.lm.decode_step(pi_st, a);
            ref_logits = ref.decode_step(ref_st, a);
        }
    }
    return ep;
}

inline std::vector<Episode> rollout(const PolicyValue& policy, const genbackend::TinyLm& ref,
                                    const rm::RewardModel& reward,
                                    const std::vector<std::string>& prompts,
                                    const PpoConfig& cfg, uint64_t iteration_seed) {
    if (prompts.empty()) throw std::invalid_argument("rollout: no prompts");
    std::vector<Episode> eps(size_t(cfg.batch));
    util::parallel_for(size_t(cfg.batch), cfg.jobs, [&](size_t i) {
        util::Rng r = util::Rng(iteration_seed).derive("episode", uint64_t(i));
        const std::string& q = prompts[r.derive("prompt").below(prompts.size())];
        Episode ep = sample_episode(policy, ref, q, cfg, r.derive("sample").seed());
        // reward pass-through: the raw scalar score, no normalization
        ep.reward = reward.score(ep.prompt, ep.text);
        eps[i] = std::move(ep);
    });
    // drop empty generations (nothing to optimize)
    std::vector<Episode> out;
    for (auto& e : eps)
        if (!e.actions.empty()) out.push_back(std::move(e));
    return out;
}

// shaped per-token rewards -> GAE advantages and returns
struct AdvantageResult {
    std::vector<std::vector<double>> advantages; // per episode, per action
    std::vector<std::vector<double>> returns;
};

inline AdvantageResult compute_advantages(const std::vector<Episode>& eps,
                                          const std::vector<std::vector<double>>& values,
                                          const PpoConfig& cfg) {
    AdvantageResult out;
    out.advantages.resize(eps.size());
    out.returns.resize(eps.size());
    for (size_t e = 0; e < eps.size(); ++e) {
        const auto& ep = eps[e];
        const auto& v = values[e];
        const size_t T = ep.actions.size();
        if (T == 0) continue;
        std::vector<double> reward(T, 0.0);
        if (cfg.kl_per_sequence) {
            double total_kl = 0.0;
            for (double k : ep.kl) total_kl += k;
            reward[T - 1] = ep.reward - cfg.kl_coeff * total_kl;
        } else {
            for (size_t t = 0; t < T; ++t) reward[t] = -cfg.kl_coeff * ep.kl[t];
            reward[T - 1] += ep.reward;
        }
        auto& adv = out.advantages[e];
        auto& ret = out.returns[e];
        adv.assign(T, 0.0);
        ret.assign(T, 0.0);
        double gae = 0.0;
        for (size_t t = T; t-- > 0;) {
            double v_next = t + 1 < T ? v[t + 1] : 0.0;
            double delta = reward[t] + cfg.discount * v_next - v[t];
            gae = delta + cfg.discount * cfg.gae_lambda * gae;
            adv[t] = gae;
            ret[t] = adv[t] + v[t];
        }
    }
    return out;
}

struct PpoMetrics {
    int64_t step = 0; // episodes consumed so far
    double mean_reward = 0.0;
    double mean_kl = 0.0; // mean over episodes of summed per-token KL
    double clip_frac = 0.0;
    double value_loss = 0.0;
    double lr = 0.0;

    nlohmann::json to_json() const {
        return {{"step", step},         {"mean_reward", mean_reward},
                {"mean_kl", mean_kl},   {"clip_frac", clip_frac},
                {"value_loss", value_loss}, {"lr", lr}};
    }
};

namespace detail {

struct EpisodeForward {
    genbackend::TinyLm::Cache cache;
    std::vector<int> tokens;   // prompt + actions
    size_t first_action = 0;   // index into tokens of the first action
};

inline EpisodeForward forward_episode(const PolicyValue& policy, const Episode& ep) {
    EpisodeForward f;
    f.tokens = ep.prompt_tokens;
    f.first_action = f.tokens.size();
    f.tokens.insert(f.tokens.end(), ep.actions.begin(), ep.actions.end());
    f.cache = policy.lm.forward(f.tokens);
    return f;
}

} // namespace detail

// One clipped-surrogate pass over a batch of episodes: inner_epochs sweeps of
// shuffled episode minibatches, cosine-decayed learning rate. Returns metrics
// for the batch; `progress` in [0,1] positions this update on the lr schedule.
inline PpoMetrics ppo_update(PolicyValue& policy, const std::vector<Episode>& episodes,
                             const PpoConfig& cfg, genbackend::Adam& opt, double progress,
                             util::Rng& rng) {
    cfg.validate();
    if (episodes.empty()) throw std::invalid_argument("ppo_update: no episodes");
    const int dm = policy.lm.dims.embed;
    const size_t nb = policy.lm.param_count();

    // values under the current policy, then freeze advantages for all epochs
    std::vector<std::vector<double>> values(episodes.size());
    for (size_t e = 0; e < episodes.size(); ++e) {
        detail::EpisodeForward f = detail::forward_episode(policy, episodes[e]);
        auto& v = values[e];
        v.resize(episodes[e].actions.size());
        for (size_t t = 0; t < v.size(); ++t)
            v[t] = policy.value_at(f.cache, int(f.first_action + t - 1));
    }
    AdvantageResult adv = compute_advantages(episodes, values, cfg);

    const double lr_now =
        cfg.lr * (cfg.min_lr_frac + (1.0 - cfg.min_lr_frac) *
                                        0.5 * (1.0 + std::cos(3.14159265358979323846 * progress)));

    PpoMetrics m;
    m.lr = lr_now;
    double kl_sum = 0.0, reward_sum = 0.0;
    for (const auto& ep : episodes) {
        reward_sum += ep.reward;
        double k = 0.0;
        for (double x : ep.kl) k += x;
        kl_sum += k;
    }
    m.mean_reward = reward_sum / double(episodes.size());
    m.mean_kl = kl_sum / double(episodes.size());

    int64_t clipped = 0, ratio_count = 0;
    double vloss_sum = 0.0;
    int64_t vloss_count = 0;

    std::vector<size_t> order(episodes.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<double> grad(nb + policy.vhead.size());

    for (int inner = 0; inner < cfg.inner_epochs; ++inner) {
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.below(i)]);
        for (size_t mb = 0; mb < order.size(); mb += size_t(cfg.minibatch)) {
            size_t me = std::min(order.size(), mb + size_t(cfg.minibatch));
            std::fill(grad.begin(), grad.end(), 0.0);
            int64_t token_count = 0;
            for (size_t q = mb; q < me; ++q) token_count += int64_t(episodes[order[q]].actions.size());
            if (token_count == 0) continue;

            std::vector<double> bb_grad(nb, 0.0);
            for (size_t q = mb; q < me; ++q) {
                const Episode& ep = episodes[order[q]];
                const auto& A = adv.advantages[order[q]];
                const auto& R = adv.returns[order[q]];
                detail::EpisodeForward f = detail::forward_episode(policy, ep);
                const size_t T = ep.actions.size();
                std::vector<std::vector<double>> dlogits(f.tokens.size());
                std::vector<double> dnf(f.tokens.size() * size_t(dm), 0.0);
                const double tok_w = 1.0 / double(token_count);

                for (size_t t = 0; t < T; ++t) {
                    const int pos = int(f.first_action + t - 1); // state position
                    std::vector<double> lg = policy.lm.logits_at(f.cache, pos);
                    std::vector<double> p = genbackend::TinyLm::softmax(lg);
                    const int a = ep.actions[t];
                    const double new_logp = std::log(std::max(p[size_t(a)], 1e-300));
                    const double ratio = std::exp(new_logp - ep.logp_pi[t]);
                    ++ratio_count;
                    const bool clip_active = ratio < 1.0 - cfg.clip_ratio ||
                                             ratio > 1.0 + cfg.clip_ratio;
                    if (clip_active) ++clipped;

                    // d(-min(r A, clip(r) A))/d new_logp: the clipped branch is
                    // constant in r, so gradient flows only when the unclipped
                    // term attains the min
                    double dsurr_dlogp = 0.0;
                    const double unclipped = ratio * A[t];
                    const double clipped_val =
                        std::clamp(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio) * A[t];
                    if (unclipped <= clipped_val) dsurr_dlogp = -ratio * A[t];

                    // value loss (v - R)^2 at the same state
                    const double v = policy.value_at(f.cache, pos);
                    const double verr = v - R[t];
                    vloss_sum += verr * verr;
                    ++vloss_count;

                    auto& dl = dlogits[size_t(pos)];
                    if (dl.empty()) dl.assign(size_t(policy.lm.dims.vocab), 0.0);
                    if (dsurr_dlogp != 0.0) {
                        const double g = dsurr_dlogp * tok_w;
                        for (int w = 0; w < policy.lm.dims.vocab; ++w)
                            dl[size_t(w)] += g * (-p[size_t(w)]);
                        dl[size_t(a)] += g;
                    }
                    // value head gradient + its backbone contribution
                    const double gv = cfg.value_loss_coeff * 2.0 * verr * tok_w;
                    double* gvh = grad.data() + nb;
                    const double* nft = &f.cache.nf[size_t(pos) * dm];
                    for (int i = 0; i < dm; ++i) {
                        gvh[i] += gv * nft[i];
                        dnf[size_t(pos) * dm + i] += gv * policy.vhead[size_t(i)];
                    }
                    gvh[dm] += gv;
                }
                bb_grad.assign(nb, 0.0);
                policy.lm.backward(f.cache, dlogits, dnf, bb_grad);
                for (size_t i = 0; i < nb; ++i) grad[i] += bb_grad[i];
            }
            std::vector<double> params = policy.lm.params;
            params.insert(params.end(), policy.vhead.begin(), policy.vhead.end());
            opt.step(params, grad, lr_now);
            std::copy(params.begin(), params.begin() + ptrdiff_t(nb),
                      policy.lm.params.begin());
            std::copy(params.begin() + ptrdiff_t(nb), params.end(), policy.vhead.begin());
        }
    }
    m.clip_frac = ratio_count ? double(clipped) / double(ratio_count) : 0.0;
    m.value_loss = vloss_count ? vloss_sum / double(vloss_count) : 0.0;
    if (!std::isfinite(m.value_loss) || !std::isfinite(m.mean_reward))
        throw std::runtime_error("ppo_update produced non-finite metrics");
    return m;
}

struct RlsfResult {
    PolicyValue policy;
    std::vector<PpoMetrics> metrics;
};

// Full loop: rollout a batch, update, append metrics; stops at the episode
// budget. Metrics go to `metrics_path` as one JSON object per iteration.
inline RlsfResult train_rlsf(PolicyValue policy, const rm::RewardModel& reward,
                             std::vector<std::string> prompts, const PpoConfig& cfg,
                             const std::string& metrics_path = "") {
    cfg.validate();
    if (prompts.empty()) throw std::invalid_argument("train_rlsf: no prompts");
    if (int(prompts.size()) > cfg.prompts) prompts.resize(size_t(cfg.prompts));
    const genbackend::TinyLm ref = policy.lm; // frozen reference
    genbackend::Adam opt(policy.lm.param_count() + policy.vhead.size(),
                         genbackend::AdamConfig{cfg.lr, cfg.adam_beta1, cfg.adam_beta2,
                                                1e-8, 0.0});
    util::Rng rng(util::mix64(cfg.seed ^ 0x99057ull));
    RlsfResult out;
    std::ofstream mf;
    if (!metrics_path.empty()) {
        mf.open(metrics_path, std::ios::trunc);
        if (!mf) throw std::runtime_error("cannot open metrics file: " + metrics_path);
    }
    const int iters = cfg.episodes / cfg.batch;
    for (int it = 0; it < iters; ++it) {
        uint64_t iter_seed = util::Rng(cfg.seed).derive("iter", uint64_t(it)).seed();
        std::vector<Episode> eps = rollout(policy, ref, reward, prompts, cfg, iter_seed);
        if (eps.empty()) continue;
        double progress = iters > 1 ? double(it) / double(iters - 1) : 0.0;
        PpoMetrics m = ppo_update(policy, eps, cfg, opt, progress, rng);
        m.step = int64_t(it + 1) * cfg.batch;
        out.metrics.push_back(m);
        if (mf) mf << m.to_json().dump() << "\n";
    }
    out.policy = std::move(policy);
    return out;
}

} // namespace synthfeed::policytrain

// Clipped-surrogate policy optimization: advantage estimation, the KL
// estimator, update-loop identities, reward pass-through, and checkpoints.
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "synthfeed/ppo.hpp"
#include "synthfeed/reward_model.hpp"
#include "synthfeed/util.hpp"

#include "helpers.hpp"

using namespace synthfeed;
using namespace synthfeed::policytrain;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;
using testutil::perturbed_lm;
using testutil::scratch_dir;
using testutil::tiny_dims;

namespace {

rm::RewardModel random_reward(uint64_t seed) {
    rm::RewardModel model(perturbed_lm(seed, tiny_dims()));
    util::Rng rng(seed ^ 0x5eedull);
    for (auto& h : model.head) h = 0.3 * rng.normal();
    return model;
}

Episode episode_with(std::vector<double> kl, double reward, size_t actions) {
    Episode ep;
    ep.actions.assign(actions, int('x'));
    ep.logp_pi.assign(actions, -1.0);
    ep.logp_ref.assign(actions, -1.0);
    ep.kl = std::move(kl);
    ep.reward = reward;
    return ep;
}

} // namespace

TEST_CASE("configuration defaults, the reference point, and validation", "[ppo]") {
    PpoConfig cfg;
    CHECK(cfg.episodes == 800);
    CHECK(cfg.prompts == 200);
    CHECK(cfg.batch == 32);
    CHECK(cfg.minibatch == 8);
    CHECK(cfg.inner_epochs == 4);
    CHECK(cfg.clip_ratio == 0.2);
    CHECK(cfg.discount == 1.0);
    CHECK(cfg.kl_coeff == 0.05);
    CHECK(cfg.sample_temperature == 1.0);
    CHECK(cfg.gae_lambda == 0.95);
    CHECK_FALSE(cfg.reward_normalization);
    CHECK_NOTHROW(cfg.validate());

    PpoConfig ref = reference_ppo_config();
    CHECK(ref.episodes == 80000);
    CHECK(ref.prompts == 20000);
    CHECK(ref.batch == 512);
    CHECK(ref.minibatch == 32);
    CHECK(ref.lr == 1e-6);
    CHECK(ref.min_lr_frac == 0.8);

    auto broken = [&](auto mutate) {
        PpoConfig c;
        mutate(c);
        CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    };
    broken([](PpoConfig& c) { c.batch = 30; });        // minibatch must divide
    broken([](PpoConfig& c) { c.minibatch = 0; });
    broken([](PpoConfig& c) { c.clip_ratio = 0.0; });
    broken([](PpoConfig& c) { c.clip_ratio = 1.0; });
    broken([](PpoConfig& c) { c.kl_coeff = -0.01; });
    broken([](PpoConfig& c) { c.sample_temperature = 0.0; });
    broken([](PpoConfig& c) { c.discount = 1.1; });
    broken([](PpoConfig& c) { c.gae_lambda = -0.1; });
    broken([](PpoConfig& c) { c.episodes = -1; });
    broken([](PpoConfig& c) { c.prompts = 0; });
    broken([](PpoConfig& c) { c.rollout_max_tokens = 0; });
}

TEST_CASE("generalized advantages match a hand-walked three-step episode", "[ppo]") {
    PpoConfig cfg;
    cfg.discount = 0.9;
    cfg.gae_lambda = 0.8;
    cfg.kl_coeff = 0.05;

    std::vector<Episode> eps = {episode_with({0.1, -0.05, 0.2}, 1.7, 3)};
    std::vector<std::vector<double>> values = {{0.3, -0.2, 0.5}};

    // shaped rewards: per-token KL penalty, terminal scalar on the last step
    double r0 = -0.05 * 0.1;
    double r1 = -0.05 * -0.05;
    double r2 = -0.05 * 0.2 + 1.7;

    double d2 = r2 + 0.9 * 0.0 - 0.5;
    double d1 = r1 + 0.9 * 0.5 - (-0.2);
    double d0 = r0 + 0.9 * (-0.2) - 0.3;
    double g2 = d2;
    double g1 = d1 + 0.9 * 0.8 * g2;
    double g0 = d0 + 0.9 * 0.8 * g1;

    AdvantageResult out = compute_advantages(eps, values, cfg);
    REQUIRE(out.advantages.size() == 1);
    REQUIRE(out.advantages[0].size() == 3);
    CHECK_THAT(out.advantages[0][0], WithinAbs(g0, 1e-12));
    CHECK_THAT(out.advantages[0][1], WithinAbs(g1, 1e-12));
    CHECK_THAT(out.advantages[0][2], WithinAbs(g2, 1e-12));
    for (int t = 0; t < 3; ++t)
        CHECK_THAT(out.returns[0][size_t(t)],
                   WithinAbs(out.advantages[0][size_t(t)] + values[0][size_t(t)], 1e-12));

    SECTION("a zero smoothing coefficient reduces to one-step differences") {
        PpoConfig td = cfg;
        td.gae_lambda = 0.0;
        AdvantageResult one = compute_advantages(eps, values, td);
        CHECK_THAT(one.advantages[0][0], WithinAbs(d0, 1e-12));
        CHECK_THAT(one.advantages[0][1], WithinAbs(d1, 1e-12));
        CHECK_THAT(one.advantages[0][2], WithinAbs(d2, 1e-12));
        // smoothing changes the earlier steps
        CHECK(std::fabs(one.advantages[0][0] - out.advantages[0][0]) > 1e-6);
    }

    SECTION("sequence-level shaping folds the whole penalty into the last step") {
        PpoConfig seq = cfg;
        seq.kl_per_sequence = true;
        AdvantageResult folded = compute_advantages(eps, values, seq);
        double total_kl = 0.1 - 0.05 + 0.2;
        double f2 = (1.7 - 0.05 * total_kl) + 0.9 * 0.0 - 0.5;
        double f1 = 0.0 + 0.9 * 0.5 - (-0.2);
        double f0 = 0.0 + 0.9 * (-0.2) - 0.3;
        double e2 = f2;
        double e1 = f1 + 0.72 * e2;
        double e0 = f0 + 0.72 * e1;
        CHECK_THAT(folded.advantages[0][2], WithinAbs(e2, 1e-12));
        CHECK_THAT(folded.advantages[0][1], WithinAbs(e1, 1e-12));
        CHECK_THAT(folded.advantages[0][0], WithinAbs(e0, 1e-12));
    }

    SECTION("an episode with no actions yields empty vectors") {
        std::vector<Episode> none = {episode_with({}, 1.0, 0)};
        std::vector<std::vector<double>> v0 = {{}};
        AdvantageResult empty = compute_advantages(none, v0, cfg);
        CHECK(empty.advantages[0].empty());
        CHECK(empty.returns[0].empty());
    }
}

TEST_CASE("the sampled KL estimate converges on the analytic divergence", "[ppo]") {
    // fresh backbones have a zero unembedding, so logits equal the bias row:
    // both models emit one fixed distribution at every step
    genbackend::LmDims dims = tiny_dims(16, 32, 512);
    PolicyValue policy{genbackend::TinyLm(dims, 0)};
    genbackend::TinyLm ref(dims, 0);

    const auto off = genbackend::TinyLm::layout(dims);
    std::vector<double> pi_logits(259, -30.0), ref_logits(259, -30.0);
    pi_logits[size_t('a')] = 1.0;
    pi_logits[size_t('b')] = 0.5;
    pi_logits[size_t('c')] = 0.0;
    ref_logits[size_t('a')] = 0.2;
    ref_logits[size_t('b')] = 0.9;
    ref_logits[size_t('c')] = 0.4;
    for (size_t i = 0; i < 259; ++i) {
        policy.lm.params[off.ub + i] = pi_logits[i];
        ref.params[off.ub + i] = ref_logits[i];
    }

    std::vector<double> p = genbackend::TinyLm::softmax(pi_logits);
    std::vector<double> q = genbackend::TinyLm::softmax(ref_logits);
    double analytic = 0.0;
    for (size_t i = 0; i < 259; ++i) analytic += p[i] * std::log(p[i] / q[i]);

    PpoConfig cfg;
    cfg.rollout_max_tokens = 300;
    Episode ep = sample_episode(policy, ref, "estimate this", cfg, 12345);
    REQUIRE(ep.actions.size() == 300);

    double mean = 0.0;
    for (size_t t = 0; t < ep.kl.size(); ++t) {
        int a = ep.actions[t];
        // stored log-probs are exact log-softmax values of the fixed logits
        CHECK(ep.logp_pi[t] == std::log(p[size_t(a)]));
        CHECK(ep.logp_ref[t] == std::log(q[size_t(a)]));
        CHECK(ep.kl[t] == ep.logp_pi[t] - ep.logp_ref[t]);
        mean += ep.kl[t];
    }
    mean /= double(ep.kl.size());

    double var = 0.0;
    for (double k : ep.kl) var += (k - mean) * (k - mean);
    double se = std::sqrt(var / double(ep.kl.size())) / std::sqrt(double(ep.kl.size()));
    CHECK(std::fabs(mean - analytic) <= 3.0 * se + 1e-9);
    CHECK(analytic > 0.0);
}

TEST_CASE("an identical reference gives exactly zero KL on every token", "[ppo]") {
    PolicyValue policy{perturbed_lm(17, tiny_dims(16, 32, 128))};
    genbackend::TinyLm ref = policy.lm;
    PpoConfig cfg;
    cfg.rollout_max_tokens = 40;

    for (uint64_t seed : {1ull, 2ull, 3ull}) {
        Episode ep = sample_episode(policy, ref, "mirror", cfg, seed);
        REQUIRE_FALSE(ep.kl.empty());
        for (size_t t = 0; t < ep.kl.size(); ++t) {
            CHECK(ep.kl[t] == 0.0);
            CHECK(ep.logp_pi[t] == ep.logp_ref[t]);
        }
    }
}

TEST_CASE("zero advantages leave the policy bitwise untouched", "[ppo]") {
    // pi == ref makes every KL zero; forcing the terminal reward to zero and
    // keeping the value head at zero makes every shaped reward, value target,
    // and advantage exactly zero, so no gradient flows anywhere
    PolicyValue policy{perturbed_lm(31, tiny_dims(16, 32, 128))};
    genbackend::TinyLm ref = policy.lm;
    PpoConfig cfg;
    cfg.batch = 16;
    cfg.minibatch = 4;
    cfg.rollout_max_tokens = 16;

    std::vector<Episode> eps;
    util::Rng er(37);
    for (int i = 0; i < cfg.batch; ++i) {
        Episode ep = sample_episode(policy, ref, i % 2 ? "alpha" : "beta", cfg,
                                    er.derive("e", uint64_t(i)).seed());
        ep.reward = 0.0;
        eps.push_back(std::move(ep));
    }

    std::vector<double> params_before = policy.lm.params;
    std::vector<double> vhead_before = policy.vhead;
    genbackend::Adam opt(policy.lm.param_count() + policy.vhead.size());
    util::Rng rng(41);
    PpoMetrics m = ppo_update(policy, eps, cfg, opt, 0.0, rng);

    CHECK(m.clip_frac == 0.0);
    CHECK(m.value_loss == 0.0);
    CHECK(m.mean_reward == 0.0);
    CHECK(m.mean_kl == 0.0);
    CHECK(policy.lm.params == params_before);
    CHECK(policy.vhead == vhead_before);
}

TEST_CASE("rollouts carry the raw reward-model score through unchanged", "[ppo]") {
    PolicyValue policy{perturbed_lm(43, tiny_dims(16, 32, 128))};
    genbackend::TinyLm ref = policy.lm;
    rm::RewardModel reward = random_reward(47);
    PpoConfig cfg;
    cfg.batch = 12;
    cfg.rollout_max_tokens = 12;

    std::vector<std::string> prompts = {"first topic", "second topic"};
    std::vector<Episode> eps = rollout(policy, ref, reward, prompts, cfg, 999);
    REQUIRE(eps.size() == 12); // every episode samples at least one token

    for (const auto& ep : eps) {
        CHECK((ep.prompt == prompts[0] || ep.prompt == prompts[1]));
        CHECK(ep.reward == reward.score(ep.prompt, ep.text));
        CHECK(ep.actions.size() == ep.logp_pi.size());
        CHECK(ep.actions.size() == ep.kl.size());
    }

    // same iteration seed, same everything
    std::vector<Episode> again = rollout(policy, ref, reward, prompts, cfg, 999);
    REQUIRE(again.size() == eps.size());
    for (size_t i = 0; i < eps.size(); ++i) {
        CHECK(again[i].text == eps[i].text);
        CHECK(again[i].reward == eps[i].reward);
        CHECK(again[i].actions == eps[i].actions);
    }
    CHECK_THROWS_WITH(rollout(policy, ref, reward, {}, cfg, 1),
                      ContainsSubstring("no prompts"));
}

TEST_CASE("the update loop climbs a programmatic byte reward", "[ppo]") {
    genbackend::LmDims dims = tiny_dims(16, 32, 128);
    PolicyValue policy{genbackend::TinyLm(dims, 1)};
    const genbackend::TinyLm ref = policy.lm;

    PpoConfig cfg;
    cfg.batch = 32;
    cfg.minibatch = 8;
    cfg.rollout_max_tokens = 24;
    cfg.kl_coeff = 0.0; // pure reward chasing for the test
    cfg.lr = 3e-3;

    // dense programmatic reward: the fraction of emitted bytes that are
    // lowercase letters (about 0.10 under the untrained uniform policy)
    auto letter_frac = [](const Episode& ep) {
        double z = 0;
        for (char c : ep.text)
            if (c >= 'a' && c <= 'z') z += 1;
        return ep.actions.empty() ? 0.0 : z / double(ep.actions.size());
    };
    std::vector<std::string> prompts = {"say z", "more z please", "zzz"};
    auto sample_batch = [&](uint64_t s) {
        std::vector<Episode> eps;
        util::Rng r(s);
        for (int i = 0; i < cfg.batch; ++i) {
            Episode ep = sample_episode(policy, ref, prompts[r.below(3)], cfg,
                                        r.derive("e", uint64_t(i)).seed());
            ep.reward = letter_frac(ep);
            eps.push_back(std::move(ep));
        }
        return eps;
    };
    auto mean_reward = [](const std::vector<Episode>& eps) {
        double s = 0;
        for (const auto& e : eps) s += e.reward;
        return s / double(eps.size());
    };

    genbackend::Adam opt(policy.lm.param_count() + policy.vhead.size(),
                         genbackend::AdamConfig{cfg.lr, 0.9, 0.95, 1e-8, 0.0});
    util::Rng rng(7);
    double first = -1.0;
    std::vector<PpoMetrics> metrics;
    for (int it = 0; it < 10; ++it) {
        std::vector<Episode> eps = sample_batch(100 + uint64_t(it));
        if (it == 0) first = mean_reward(eps);
        metrics.push_back(ppo_update(policy, eps, cfg, opt, double(it) / 9.0, rng));
    }
    double last = mean_reward(sample_batch(200));

    // chance rate is 26/259; ten updates should lift it decisively
    CHECK(first <= 0.14);
    CHECK(first >= 0.07);
    CHECK(last >= 1.3 * first);
    // divergence from the frozen reference grows once updates land
    CHECK(metrics.front().mean_kl == 0.0);
    CHECK(metrics.back().mean_kl > 0.1);

    CHECK_THROWS_WITH(ppo_update(policy, {}, cfg, opt, 0.0, rng),
                      ContainsSubstring("no episodes"));
}

TEST_CASE("a zero episode budget runs no iterations", "[ppo]") {
    std::string dir = scratch_dir("ppoidle");
    PolicyValue policy{perturbed_lm(53, tiny_dims(16, 32, 128))};
    std::vector<double> before = policy.lm.params;
    rm::RewardModel reward = random_reward(59);

    PpoConfig cfg;
    cfg.episodes = 0;
    std::string metrics_path = dir + "/metrics.jsonl";
    RlsfResult out = train_rlsf(policy, reward, {"only prompt"}, cfg, metrics_path);

    CHECK(out.metrics.empty());
    CHECK(out.policy.lm.params == before);
    CHECK(testutil::read_file(metrics_path).empty());

    CHECK_THROWS_WITH(train_rlsf(out.policy, reward, {}, cfg),
                      ContainsSubstring("no prompts"));
}

TEST_CASE("metrics stream as one JSON object per iteration", "[ppo]") {
    std::string dir = scratch_dir("ppometrics");
    PolicyValue policy{perturbed_lm(61, tiny_dims(16, 32, 128))};
    rm::RewardModel reward = random_reward(67);

    PpoConfig cfg;
    cfg.episodes = 64;
    cfg.batch = 32;
    cfg.minibatch = 8;
    cfg.rollout_max_tokens = 10;
    cfg.seed = 71;

    std::string metrics_path = dir + "/metrics.jsonl";
    RlsfResult out = train_rlsf(policy, reward, {"topic one", "topic two"}, cfg,
                                metrics_path);
    REQUIRE(out.metrics.size() == 2);
    CHECK(out.metrics[0].step == 32);
    CHECK(out.metrics[1].step == 64);

    // cosine schedule endpoints: full rate first, the floor fraction last
    CHECK_THAT(out.metrics[0].lr, WithinAbs(cfg.lr, 1e-15));
    CHECK_THAT(out.metrics[1].lr, WithinAbs(cfg.lr * cfg.min_lr_frac, 1e-15));

    std::ifstream in(metrics_path);
    std::string line;
    size_t rows = 0;
    while (std::getline(in, line)) {
        nlohmann::json j = nlohmann::json::parse(line);
        for (const char* key :
             {"step", "mean_reward", "mean_kl", "clip_frac", "value_loss", "lr"})
            CHECK(j.contains(key));
        CHECK(j["step"].get<int64_t>() == out.metrics[rows].step);
        CHECK(j["lr"].get<double>() == out.metrics[rows].lr);
        ++rows;
    }
    CHECK(rows == 2);
}

TEST_CASE("policy checkpoints round-trip and accept plain LM files", "[ppo]") {
    std::string dir = scratch_dir("ppockpt");
    PolicyValue pv{perturbed_lm(73, tiny_dims(16, 32, 128))};
    util::Rng rng(79);
    for (auto& v : pv.vhead) v = 0.2 * rng.normal();

    std::string path = dir + "/policy.ckpt";
    save_policy(pv, path);
    PolicyValue back = load_policy(path);
    REQUIRE(back.vhead.size() == pv.vhead.size());
    for (size_t i = 0; i < pv.vhead.size(); ++i)
        CHECK(back.vhead[i] == double(float(pv.vhead[i])));
    REQUIRE(back.lm.params.size() == pv.lm.params.size());
    for (size_t i = 0; i < pv.lm.params.size(); ++i)
        CHECK(back.lm.params[i] == double(float(pv.lm.params[i])));

    // a plain LM checkpoint loads with a fresh zero value head
    std::string lm_path = dir + "/plain.lm";
    genbackend::save_lm(pv.lm, lm_path);
    PolicyValue from_lm = load_policy(lm_path);
    for (double v : from_lm.vhead) CHECK(v == 0.0);

    // a reward-model checkpoint is not a policy
    rm::RewardModel rmodel(pv.lm);
    std::string rm_path = dir + "/reward.rm";
    rm::save_rm(rmodel, rm_path);
    CHECK_THROWS_WITH(load_policy(rm_path), ContainsSubstring("not a policy checkpoint"));

    genbackend::ckpt::Blob blob;
    blob.kind = genbackend::ckpt::Kind::policy_value;
    blob.dims = pv.lm.dims;
    blob.backbone = pv.lm.params;
    blob.head = {1.0, 2.0, 3.0};
    std::string bad = dir + "/badhead.ckpt";
    genbackend::ckpt::save(blob, bad);
    CHECK_THROWS_WITH(load_policy(bad), ContainsSubstring("value-head size mismatch"));
}

#include <catch2/catch_amalgamated.hpp>

#include <functional>
#include <set>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "synthfeed/querygen.hpp"
#include "synthfeed/toyworld.hpp"

using namespace synthfeed;
using Catch::Matchers::WithinAbs;
using querygen::MinerConfig;
using querygen::MineStats;
using querygen::rouge_l;

namespace {

// Backend that replays a script (or a generator function), recording requests.
class ScriptedBackend : public genbackend::Backend {
public:
    explicit ScriptedBackend(std::vector<std::string> script)
        : next_([s = std::move(script), i = size_t(0)]() mutable {
              return i < s.size() ? s[i++] : std::string();
          }) {}
    explicit ScriptedBackend(std::function<std::string()> next) : next_(std::move(next)) {}

    genbackend::GenResponse generate(const genbackend::GenRequest& req) override {
        req.validate();
        requests.push_back(req);
        genbackend::GenResponse out;
        out.completions.push_back({next_(), std::nullopt});
        return out;
    }
    std::string name() const override { return "scripted"; }

    std::vector<genbackend::GenRequest> requests;

private:
    std::function<std::string()> next_;
};

std::vector<std::string> disjoint_seeds(int n, const std::string& tag = "seed") {
    std::vector<std::string> s;
    for (int i = 0; i < n; ++i)
        s.push_back(tag + std::to_string(i) + "a " + tag + std::to_string(i) + "b " +
                    tag + std::to_string(i) + "c");
    return s;
}

bool is_subsequence(const std::vector<std::string>& sub,
                    const std::vector<std::string>& seq) {
    size_t j = 0;
    for (size_t i = 0; i < seq.size() && j < sub.size(); ++i)
        if (seq[i] == sub[j]) ++j;
    return j == sub.size();
}

// exponential-time reference: longest subsequence of `a` that also appears in `b`
size_t lcs_by_enumeration(const std::vector<std::string>& a,
                          const std::vector<std::string>& b) {
    size_t best = 0;
    for (uint32_t mask = 0; mask < (1u << a.size()); ++mask) {
        std::vector<std::string> sub;
        for (size_t i = 0; i < a.size(); ++i)
            if (mask & (1u << i)) sub.push_back(a[i]);
        if (sub.size() > best && is_subsequence(sub, b)) best = sub.size();
    }
    return best;
}

std::string join(const std::vector<std::string>& toks) {
    std::string out;
    for (size_t i = 0; i < toks.size(); ++i) {
        if (i) out += ' ';
        out += toks[i];
    }
    return out;
}

} // namespace

TEST_CASE("lcs overlap reproduces the worked example and identities", "[querygen]") {
    // LCS("a b c d", "a c e") = "a c": precision 2/4, recall 2/3, F1 = 4/7
    CHECK_THAT(rouge_l("a b c d", "a c e"), WithinAbs(4.0 / 7.0, 1e-12));

    CHECK_THAT(rouge_l("same three words", "same three words"), WithinAbs(1.0, 1e-12));
    CHECK_THAT(rouge_l("alpha beta", "gamma delta"), WithinAbs(0.0, 1e-12));
    CHECK_THAT(rouge_l("", "anything here"), WithinAbs(0.0, 1e-12));
    CHECK_THAT(rouge_l("anything here", ""), WithinAbs(0.0, 1e-12));
    CHECK_THAT(rouge_l("   ", "word"), WithinAbs(0.0, 1e-12));

    // case folding and whitespace tokenization
    CHECK_THAT(rouge_l("Hello WORLD", "hello world"), WithinAbs(1.0, 1e-12));
    CHECK_THAT(rouge_l("a\tb\n c", "a b c"), WithinAbs(1.0, 1e-12));

    // symmetric in its arguments
    util::Rng rng(5);
    const std::vector<std::string> vocab = {"aa", "bb", "cc", "dd", "ee"};
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<std::string> x, y;
        for (size_t i = 0, n = rng.below(7); i < n; ++i)
            x.push_back(vocab[rng.below(vocab.size())]);
        for (size_t i = 0, n = rng.below(7); i < n; ++i)
            y.push_back(vocab[rng.below(vocab.size())]);
        CHECK(rouge_l(join(x), join(y)) == rouge_l(join(y), join(x)));
    }
}

TEST_CASE("lcs overlap agrees with brute-force enumeration on 1000 pairs", "[querygen]") {
    util::Rng rng(99);
    const std::vector<std::string> vocab = {"aa", "bb", "cc", "dd"};
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<std::string> a, b;
        for (size_t i = 0, n = rng.below(9); i < n; ++i)
            a.push_back(vocab[rng.below(vocab.size())]);
        for (size_t i = 0, n = rng.below(9); i < n; ++i)
            b.push_back(vocab[rng.below(vocab.size())]);

        double expected = 0.0;
        if (!a.empty() && !b.empty()) {
            double lcs = double(lcs_by_enumeration(a, b));
            double p = lcs / double(a.size()), r = lcs / double(b.size());
            expected = (p + r == 0.0) ? 0.0 : 2.0 * p * r / (p + r);
        }
        INFO("a=\"" << join(a) << "\" b=\"" << join(b) << "\"");
        CHECK_THAT(rouge_l(join(a), join(b)), WithinAbs(expected, 1e-12));
    }
}

TEST_CASE("miner accepts, strips prefixes, and counts each rejection kind",
          "[querygen]") {
    auto seeds = disjoint_seeds(10);
    std::vector<std::string> script = {
        "unique alpha topic one",
        "unique beta topic two\nQuery: trailing noise ignored", // multi-line: first line
        seeds[1],                                               // duplicate of a seed
        "look at this IMAGE of things",                         // badword, case folded
        "   ",                                                  // empty after trimming
        "Query: unique gamma topic three",                      // prompt echo stripped
        "unique alpha topic one",                               // duplicate of accepted
        "unique delta topic four",
        "unique epsilon topic five",
    };
    ScriptedBackend backend(script);

    MinerConfig cfg;
    cfg.seed_queries = seeds;
    cfg.target_count = 5;
    core::RunConfig run;
    run.seed = 31;

    MineStats stats;
    auto accepted = querygen::mine_queries(cfg, backend, run, &stats);
    REQUIRE(accepted.size() == 5);
    CHECK(accepted[0].text == "unique alpha topic one");
    CHECK(accepted[1].text == "unique beta topic two");
    CHECK(accepted[2].text == "unique gamma topic three");
    CHECK(accepted[3].text == "unique delta topic four");
    CHECK(accepted[4].text == "unique epsilon topic five");
    for (size_t i = 0; i < accepted.size(); ++i) {
        char want[24];
        std::snprintf(want, sizeof want, "q-%05zu", i);
        CHECK(accepted[i].id == want);
    }
    CHECK(stats.attempts == 9);
    CHECK(stats.rejected_duplicate == 2);
    CHECK(stats.rejected_badword == 1);
    CHECK(stats.rejected_empty == 1);

    // few-shot prompt contract: shots then an open slot, with the matching stop
    REQUIRE_FALSE(backend.requests.empty());
    const auto& first = backend.requests[0];
    size_t shots = 0;
    for (size_t at = first.prompt.find("Query:"); at != std::string::npos;
         at = first.prompt.find("Query:", at + 6))
        ++shots;
    CHECK(shots == size_t(cfg.static_shots + cfg.dynamic_shots) + 1);
    CHECK_THAT(first.prompt, Catch::Matchers::EndsWith("Query:"));
    REQUIRE(first.stop.size() == 1);
    CHECK(first.stop[0] == "\nQuery:");
    CHECK(first.temperature == 1.2);
    CHECK(first.top_p == 0.9);
}

TEST_CASE("similarity at the threshold passes; above it is rejected", "[querygen]") {
    auto seeds = disjoint_seeds(9);
    seeds.push_back("tell me about the weather outside");
    REQUIRE(seeds.size() == 10);

    // overlap 5/6 with the last seed -> above the 0.5 ceiling
    std::string near = "tell me about the weather inside";
    REQUIRE(std::max(rouge_l(near, seeds[9]), rouge_l(seeds[9], near)) > 0.5);
    // six tokens sharing exactly three with the seed -> F1 exactly 0.5, not above
    std::string boundary = "tell me about mountain goat farming";
    REQUIRE_THAT(std::max(rouge_l(boundary, seeds[9]), rouge_l(seeds[9], boundary)),
                 WithinAbs(0.5, 1e-12));

    ScriptedBackend backend(std::vector<std::string>{near, boundary});
    MinerConfig cfg;
    cfg.seed_queries = seeds;
    cfg.target_count = 1;
    core::RunConfig run;
    run.seed = 8;

    MineStats stats;
    auto accepted = querygen::mine_queries(cfg, backend, run, &stats);
    REQUIRE(accepted.size() == 1);
    CHECK(accepted[0].text == boundary);
    CHECK(stats.rejected_duplicate == 1);
    CHECK(stats.attempts == 2);
}

TEST_CASE("a backend that parrots the seeds exhausts the attempt budget",
          "[querygen]") {
    auto seeds = disjoint_seeds(10);
    ScriptedBackend backend(std::function<std::string()>([&] { return seeds[0]; }));

    MinerConfig cfg;
    cfg.seed_queries = seeds;
    cfg.target_count = 2;
    cfg.budget_per_query = 50; // budget = 100 attempts
    core::RunConfig run;
    run.seed = 4;

    MineStats stats;
    try {
        querygen::mine_queries(cfg, backend, run, &stats);
        FAIL("expected a partial-result error");
    } catch (const querygen::PartialResultError& e) {
        CHECK_THAT(e.what(),
                   Catch::Matchers::ContainsSubstring("exhausted its attempt budget"));
        CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("(100)"));
        CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("0/2"));
        CHECK(e.accepted().empty());
    }
    CHECK(stats.attempts == 100);
    CHECK(stats.rejected_duplicate == 100);
    REQUIRE(stats.acceptance_rate.size() == 1);
    CHECK(stats.acceptance_rate[0] == 0.0);
}

TEST_CASE("badworded completions are rejected case-insensitively", "[querygen]") {
    auto seeds = disjoint_seeds(10);
    ScriptedBackend backend(
        std::function<std::string()>([] { return std::string("draw a PiCtUrE of it"); }));

    MinerConfig cfg;
    cfg.seed_queries = seeds;
    cfg.target_count = 1;
    cfg.budget_per_query = 40;
    core::RunConfig run;
    run.seed = 4;

    MineStats stats;
    CHECK_THROWS_AS(querygen::mine_queries(cfg, backend, run, &stats),
                    querygen::PartialResultError);
    CHECK(stats.attempts == 40);
    CHECK(stats.rejected_badword == 40);
    CHECK(stats.acceptance_rate.empty()); // windows close every 100 attempts
}

TEST_CASE("partial results carry everything accepted before exhaustion", "[querygen]") {
    auto seeds = disjoint_seeds(10);
    // three token-disjoint lines, then repeats forever
    ScriptedBackend backend{std::function<std::string()>([i = 0]() mutable {
        ++i;
        if (i == 1) return std::string("alpine meadows in spring");
        if (i == 2) return std::string("brass instruments for beginners");
        return std::string("cultivating heirloom tomatoes");
    })};

    MinerConfig cfg;
    cfg.seed_queries = seeds;
    cfg.target_count = 10;
    cfg.budget_per_query = 2; // budget = 20 attempts
    core::RunConfig run;
    run.seed = 4;

    try {
        querygen::mine_queries(cfg, backend, run);
        FAIL("expected a partial-result error");
    } catch (const querygen::PartialResultError& e) {
        REQUIRE(e.accepted().size() == 3);
        CHECK(e.accepted()[2].text == "cultivating heirloom tomatoes");
        CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("3/10"));
    }
}

TEST_CASE("acceptance-rate trajectory closes one window per hundred attempts",
          "[querygen]") {
    auto seeds = disjoint_seeds(10);
    ScriptedBackend backend{std::function<std::string()>([i = 0]() mutable {
        ++i;
        return "w" + std::to_string(i) + " x" + std::to_string(i) + " y" +
               std::to_string(i);
    })};

    MinerConfig cfg;
    cfg.seed_queries = seeds;
    cfg.target_count = 150;
    core::RunConfig run;
    run.seed = 2;

    MineStats stats;
    auto accepted = querygen::mine_queries(cfg, backend, run, &stats);
    CHECK(accepted.size() == 150);
    CHECK(stats.attempts == 150);
    REQUIRE(stats.acceptance_rate.size() == 1);
    CHECK(stats.acceptance_rate[0] == 1.0);
}

TEST_CASE("mining the toy world reaches its target with a diverse pool", "[querygen]") {
    auto table = toyworld::make_table(24, 5, 7);
    toyworld::ToyQueryMinerBackend backend(table, 0.5);

    MinerConfig cfg;
    cfg.rouge_threshold = 0.9; // templated queries overlap heavily by construction
    cfg.target_count = 25;
    auto seed_queries = toyworld::make_queries(table, 12, 77, "seed");
    for (const auto& q : seed_queries) cfg.seed_queries.push_back(q.text);

    core::RunConfig run;
    run.seed = 13;

    MineStats stats;
    auto accepted = querygen::mine_queries(cfg, backend, run, &stats);
    REQUIRE(accepted.size() == 25);
    CHECK(stats.attempts >= 25);
    CHECK(stats.rejected_duplicate >= 1); // the recurring-favorite path fired

    for (size_t i = 0; i < accepted.size(); ++i)
        for (size_t j = i + 1; j < accepted.size(); ++j) {
            double f = std::max(rouge_l(accepted[i].text, accepted[j].text),
                                rouge_l(accepted[j].text, accepted[i].text));
            INFO(accepted[i].text << " / " << accepted[j].text);
            CHECK(f <= cfg.rouge_threshold);
        }

    // rerunning with the same seed reproduces the pool exactly
    MineStats stats2;
    toyworld::ToyQueryMinerBackend backend2(table, 0.5);
    auto again = querygen::mine_queries(cfg, backend2, run, &stats2);
    REQUIRE(again.size() == accepted.size());
    for (size_t i = 0; i < again.size(); ++i) CHECK(again[i].text == accepted[i].text);
    CHECK(stats2.attempts == stats.attempts);
}

TEST_CASE("miner configuration is validated", "[querygen]") {
    MinerConfig cfg;
    cfg.seed_queries = disjoint_seeds(10);
    REQUIRE_NOTHROW(cfg.validate());

    // documented defaults
    CHECK(cfg.static_shots == 7);
    CHECK(cfg.dynamic_shots == 3);
    CHECK(cfg.rouge_threshold == 0.5);
    CHECK(cfg.budget_per_query == 50);
    CHECK(cfg.sampling.temperature == 1.2);
    CHECK(cfg.sampling.top_p == 0.9);
    CHECK(cfg.sampling.max_tokens == 384);
    CHECK(cfg.badwords ==
          std::vector<std::string>{"image", "graph", "picture", "video"});

    auto bad = [&](auto mutate, const std::string& msg) {
        MinerConfig c = cfg;
        mutate(c);
        CHECK_THROWS_WITH(c.validate(), Catch::Matchers::ContainsSubstring(msg));
    };
    bad([](MinerConfig& c) { c.seed_queries.resize(9); }, "at least 10 seed queries");
    bad([](MinerConfig& c) { c.static_shots = 8; }, "exceed the seed pool");
    bad([](MinerConfig& c) { c.static_shots = -1; }, "non-negative");
    bad([](MinerConfig& c) { c.rouge_threshold = 1.5; }, "rouge_threshold");
    bad([](MinerConfig& c) { c.target_count = 0; }, "target_count");
    bad([](MinerConfig& c) { c.sampling.top_p = 0.0; }, "top_p");
}

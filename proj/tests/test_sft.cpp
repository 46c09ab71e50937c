// Supervised fine-tuning on demonstrations: loss-mask rendering, the
// assistant-only objective, and the training loop's bookkeeping.
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "synthfeed/sft.hpp"
#include "synthfeed/util.hpp"

#include "helpers.hpp"

using namespace synthfeed;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;
using testutil::perturbed_lm;
using testutil::tiny_dims;

namespace {

core::Demonstration demo_of(const std::vector<std::string>& texts) {
    core::Demonstration d;
    for (size_t i = 0; i < texts.size(); ++i)
        d.conversation.append(
            i % 2 == 0 ? core::Speaker::human : core::Speaker::assistant, texts[i]);
    d.source = core::DemoSource::self_play;
    return d;
}

// expected mask: true exactly on the bytes of `span` (offset by the leading
// BOS), located by searching the rendered text
void check_span_masked(const policytrain::SftExample& ex, const std::string& rendered,
                       const std::string& span) {
    size_t at = rendered.find(span);
    REQUIRE(at != std::string::npos);
    for (size_t b = at; b < at + span.size(); ++b) {
        INFO("byte " << b << " of \"" << span << "\"");
        CHECK(ex.mask[b + 1] == 1);
    }
}

} // namespace

TEST_CASE("demo rendering masks assistant bytes and the terminal EOS only",
          "[sft]") {
    core::Demonstration demo = demo_of({"hi", "yo!", "more please", "end"});
    const std::string rendered =
        "Human: hi\n\nAssistant: yo!\n\nHuman: more please\n\nAssistant: end";

    policytrain::SftExample ex = policytrain::render_demo(demo, 4096);
    REQUIRE(ex.tokens.size() == rendered.size() + 2); // BOS ... EOS
    REQUIRE(ex.mask.size() == ex.tokens.size());
    CHECK(ex.tokens.front() == genbackend::kBos);
    CHECK(ex.tokens.back() == genbackend::kEos);
    for (size_t i = 0; i < rendered.size(); ++i)
        CHECK(ex.tokens[i + 1] == int((unsigned char)rendered[i]));

    check_span_masked(ex, rendered, "yo!");
    check_span_masked(ex, rendered, "end");
    CHECK(ex.mask.back() == 1); // EOS is a training target

    // everything else -- human turns, role scaffolding, BOS -- is context only
    size_t masked = 0;
    for (char m : ex.mask) masked += size_t(m);
    CHECK(masked == 3 + 3 + 1);
    CHECK(ex.mask[0] == 0);

    // the "Assistant: " prefix itself is not a target
    size_t pfx = rendered.find("Assistant: ");
    for (size_t b = pfx; b < pfx + 11; ++b) CHECK(ex.mask[b + 1] == 0);
}

TEST_CASE("rendering truncates tokens and mask together", "[sft]") {
    core::Demonstration demo = demo_of({"aaaa", "bbbb"});
    policytrain::SftExample full = policytrain::render_demo(demo, 4096);
    policytrain::SftExample cut = policytrain::render_demo(demo, 16);
    REQUIRE(cut.tokens.size() == 16);
    REQUIRE(cut.mask.size() == 16);
    for (size_t i = 0; i < 16; ++i) {
        CHECK(cut.tokens[i] == full.tokens[i]);
        CHECK(cut.mask[i] == full.mask[i]);
    }

    core::Demonstration bad = demo_of({"only a human turn"});
    CHECK_THROWS_AS(policytrain::render_demo(bad, 64), std::invalid_argument);
}

TEST_CASE("the objective is the mean cross-entropy of masked targets", "[sft]") {
    genbackend::TinyLm lm = perturbed_lm(3, tiny_dims(16, 32, 96));
    core::Demonstration demo = demo_of({"ab", "cde"});
    policytrain::SftExample ex = policytrain::render_demo(demo, 96);

    // recompute from first principles with the public forward pass
    genbackend::TinyLm::Cache c = lm.forward(ex.tokens);
    double total = 0.0;
    int counted = 0;
    for (size_t t = 1; t < ex.tokens.size(); ++t) {
        if (!ex.mask[t]) continue;
        std::vector<double> p =
            genbackend::TinyLm::softmax(lm.logits_at(c, int(t) - 1));
        total += -std::log(p[size_t(ex.tokens[t])]);
        ++counted;
    }
    REQUIRE(counted == 4); // "cde" plus EOS

    double got = lm.lm_loss(ex.tokens, ex.mask, nullptr);
    CHECK_THAT(got, WithinAbs(total / counted, 1e-10));

    // an untrained model is exactly uniform over the byte vocabulary
    genbackend::TinyLm fresh(tiny_dims(16, 32, 96), 11);
    CHECK_THAT(fresh.lm_loss(ex.tokens, ex.mask, nullptr),
               WithinAbs(std::log(259.0), 1e-9));
}

TEST_CASE("zero epochs trains nothing and reports identical losses", "[sft]") {
    genbackend::TinyLm policy = perturbed_lm(7, tiny_dims());
    std::vector<double> before = policy.params;

    std::vector<core::Demonstration> demos;
    for (int i = 0; i < 12; ++i)
        demos.push_back(demo_of({"q " + std::to_string(i), "a " + std::to_string(i)}));

    policytrain::SftConfig cfg;
    cfg.epochs = 0;
    policytrain::SftTrainLog log = policytrain::train_sft(policy, demos, cfg);
    CHECK(log.steps == 0);
    CHECK(log.epoch_train_loss.empty());
    CHECK(log.epoch_heldout_loss.empty());
    CHECK(log.final_heldout == log.initial_heldout);
    CHECK(policy.params == before);
}

TEST_CASE("templated demonstrations compress sharply under fine-tuning", "[sft]") {
    const char* things[] = {"gears", "tides", "maps", "loam",
                            "kilns", "prisms", "reeds", "veins"};
    std::vector<core::Demonstration> demos;
    for (int i = 0; i < 100; ++i) {
        std::string t = things[i % 8];
        demos.push_back(demo_of({"tell me about " + t,
                                 "the answer about " + t + " is option " +
                                     std::to_string(i % 4) + "."}));
    }

    genbackend::TinyLm policy(tiny_dims(24, 48, 96), 13);
    policytrain::SftConfig cfg;
    cfg.lr = 3e-3;
    cfg.epochs = 4;
    cfg.seed = 17;
    policytrain::SftTrainLog log = policytrain::train_sft(policy, demos, cfg);

    // 100 demos: 90 train / 10 held out; batch 8 -> 12 steps per epoch
    CHECK(log.steps == 12 * 4);
    REQUIRE(log.epoch_heldout_loss.size() == 4);
    CHECK(log.final_heldout == log.epoch_heldout_loss.back());

    // untrained per-byte loss is ln(vocab); the template structure should cut
    // the held-out loss by well over 30%
    CHECK_THAT(log.initial_heldout, WithinAbs(std::log(259.0), 1e-6));
    CHECK(log.final_heldout <= 0.7 * log.initial_heldout);
    // training loss improves monotonically on this easy corpus
    CHECK(log.epoch_train_loss.back() < log.epoch_train_loss.front());
}

TEST_CASE("training aborts on non-finite losses and validates inputs", "[sft]") {
    std::vector<core::Demonstration> demos = {demo_of({"q", "a"})};
    policytrain::SftConfig cfg;

    genbackend::TinyLm poisoned = perturbed_lm(19, tiny_dims());
    poisoned.params[genbackend::TinyLm::layout(poisoned.dims).g1] =
        std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH(policytrain::train_sft(poisoned, demos, cfg),
                      ContainsSubstring("diverged at step 0"));

    genbackend::TinyLm policy = perturbed_lm(23, tiny_dims());
    CHECK_THROWS_WITH(policytrain::train_sft(policy, {}, cfg),
                      ContainsSubstring("no demonstrations"));

    policytrain::SftConfig bad = cfg;
    bad.batch = 0;
    CHECK_THROWS_AS(policytrain::train_sft(policy, demos, bad), std::invalid_argument);
    bad = cfg;
    bad.max_seq = 1;
    CHECK_THROWS_AS(policytrain::train_sft(policy, demos, bad), std::invalid_argument);

    // when truncation eats every assistant byte the demo is unusable
    std::vector<core::Demonstration> buried = {
        demo_of({std::string(200, 'x'), "reply"})};
    policytrain::SftConfig tight;
    tight.max_seq = 32;
    CHECK_THROWS_WITH(policytrain::train_sft(policy, buried, tight),
                      ContainsSubstring("no usable demonstrations"));
}

TEST_CASE("small sets are their own held-out split", "[sft]") {
    // 25 usable examples: indices 9 and 19 go to the held-out split, so an
    // epoch is ceil(23 / 8) = 3 steps; below 10 examples nothing is withheld
    std::vector<core::Demonstration> demos;
    for (int i = 0; i < 25; ++i)
        demos.push_back(demo_of({"q " + std::to_string(i), "a " + std::to_string(i)}));
    genbackend::TinyLm policy = perturbed_lm(29, tiny_dims());
    policytrain::SftConfig cfg;
    cfg.epochs = 2;
    policytrain::SftTrainLog log = policytrain::train_sft(policy, demos, cfg);
    CHECK(log.steps == 3 * 2);

    std::vector<core::Demonstration> few(demos.begin(), demos.begin() + 5);
    genbackend::TinyLm policy2 = perturbed_lm(31, tiny_dims());
    policytrain::SftTrainLog log2 = policytrain::train_sft(policy2, few, cfg);
    CHECK(log2.steps == 1 * 2); // all 5 train; ceil(5/8) = 1 step per epoch
    CHECK(std::isfinite(log2.final_heldout));
}

TEST_CASE("configuration defaults match the desk-scale operating point", "[sft]") {
    policytrain::SftConfig cfg;
    CHECK(cfg.batch == 8);
    CHECK(cfg.lr == 1e-3);
    CHECK(cfg.max_seq == 256);
    CHECK(cfg.epochs == 3);

    policytrain::SftConfig ref = policytrain::reference_sft_config();
    CHECK(ref.batch == 128);
    CHECK(ref.lr == 2e-5);
    CHECK(ref.max_seq == 512);
    CHECK(ref.epochs == 3);
}

#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "synthfeed/simulate.hpp"
#include "synthfeed/tinylm.hpp"
#include "synthfeed/types.hpp"
#include "synthfeed/util.hpp"

namespace synthfeed::policytrain {

struct SftConfig {
    int batch = 8;     // full-scale reference: 128
    double lr = 1e-3;  // reference: 2e-5
    int max_seq = 256; // reference: 512
    int epochs = 3;
    uint64_t seed = 0;

    void validate() const {
        if (batch < 1 || lr < 0 || max_seq < 2 || epochs < 0)
            throw std::invalid_argument("invalid SFT config");
    }
};

inline SftConfig reference_sft_config() {
    SftConfig c;
    c.batch = 128;
    c.lr = 2e-5;
    c.max_seq = 512;
    c.epochs = 3;
    return c;
}

// Rendered training sequence with its loss mask: mask[i] is true where
// tokens[i] is a training target — assistant-turn bytes and the terminal EOS.
// Human turns and role scaffolding provide context only.
struct SftExample {
    std::vector<int> tokens;
    std::vector<char> mask;
};

inline SftExample render_demo(const core::Demonstration& demo, int max_seq) {
    demo.validate();
    std::string text;
    std::vector<std::pair<size_t, size_t>> assist_spans; // byte ranges in text
    for (size_t i = 0; i < demo.conversation.turns.size(); ++i) {
        const auto& t = demo.conversation.turns[i];
        if (i) text += "\n\n";
        text += t.speaker == core::Speaker::human ? "Human: " : "Assistant: ";
        size_t start = text.size();
        text += t.text;
        if (t.speaker == core::Speaker::assistant)
            assist_spans.emplace_back(start, text.size());
    }
    SftExample ex;
    ex.tokens = genbackend::TinyLm::tokens_of(text, true);
    ex.tokens.push_back(genbackend::kEos);
    ex.mask.assign(ex.tokens.size(), 0);
    for (auto [s, e] : assist_spans)
        for (size_t b = s; b < e; ++b)
            ex.mask[b + 1] = 1; // +1 for the leading BOS
    ex.mask.back() = 1;         // EOS after the final assistant turn
    if (int(ex.tokens.size()) > max_seq) {
        ex.tokens.resize(size_t(max_seq));
        ex.mask.resize(size_t(max_seq));
    }
    return ex;
}

struct SftTrainLog {
    std::vector<double> epoch_train_loss;
    std::vector<double> epoch_heldout_loss;
    double initial_heldout = 0.0;
    double final_heldout = 0.0;
    int64_t steps = 0;
};

// Cross-entropy over assistant tokens only; a ~10% split is held out for the
// before/after loss comparison (the whole set when there are < 10 demos).
inline SftTrainLog train_sft(genbackend::TinyLm& policy,
                             const std::vector<core::Demonstration>& demos,
                             const SftConfig& cfg) {
    cfg.validate();
    if (demos.empty()) throw std::invalid_argument("train_sft: no demonstrations");
    const int cap = std::min(cfg.max_seq, policy.dims.max_seq);
    std::vector<SftExample> examples;
    for (const auto& d : demos) {
        SftExample ex = render_demo(d, cap);
        bool any = false;
        for (size_t i = 1; i < ex.mask.size(); ++i) any = any || ex.mask[i];
        if (any && ex.tokens.size() >= 2) examples.push_back(std::move(ex));
    }
    if (examples.empty()) throw std::invalid_argument("train_sft: no usable demonstrations");

    std::vector<size_t> train_idx, held_idx;
    if (examples.size() < 10) {
        for (size_t i = 0; i < examples.size(); ++i) train_idx.push_back(i);
        held_idx = train_idx;
    } else {
        for (size_t i = 0; i < examples.size(); ++i)
            (i % 10 == 9 ? held_idx : train_idx).push_back(i);
    }

    auto heldout_loss = [&]() {
        double total = 0.0;
        int64_t count = 0;
        for (size_t i : held_idx) {
            const auto& ex = examples[i];
            int64_t n = 0;
            for (size_t t = 1; t < ex.mask.size(); ++t) n += ex.mask[t] ? 1 : 0;
            total += policy.lm_loss(ex.tokens, ex.mask, nullptr) * double(n);
            count += n;
        }
        return total / double(count);
    };

    SftTrainLog log;
    log.initial_heldout = heldout_loss();
    genbackend::Adam opt(policy.param_count(),
                         genbackend::AdamConfig{cfg.lr, 0.9, 0.95, 1e-8, 0.0});
    util::Rng rng(util::mix64(cfg.seed ^ 0x5f7ull));
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<size_t> order = train_idx;
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.below(i)]);
        double epoch_loss = 0.0;
        size_t nb = 0;
        for (size_t b = 0; b < order.size(); b += size_t(cfg.batch)) {
            size_t e = std::min(order.size(), b + size_t(cfg.batch));
            std::vector<double> grad(policy.param_count(), 0.0), one;
            double batch_loss = 0.0;
            for (size_t i = b; i < e; ++i) {
                const auto& ex = examples[order[i]];
                one.assign(policy.param_count(), 0.0);
                batch_loss += policy.lm_loss(ex.tokens, ex.mask, &one);
                for (size_t p = 0; p < grad.size(); ++p) grad[p] += one[p];
            }
            double scale = 1.0 / double(e - b);
            batch_loss *= scale;
            if (!std::isfinite(batch_loss))
                throw std::runtime_error("train_sft diverged at step " +
                                         std::to_string(log.steps));
            for (double& g : grad) g *= scale;
            opt.step(policy.params, grad);
            epoch_loss += batch_loss;
            ++nb;
            ++log.steps;
        }
        log.epoch_train_loss.push_back(nb ? epoch_loss / double(nb) : 0.0);
        log.epoch_heldout_loss.push_back(heldout_loss());
    }
    log.final_heldout = cfg.epochs > 0 ? log.epoch_heldout_loss.back() : log.initial_heldout;
    return log;
}

} // namespace synthfeed::policytrain

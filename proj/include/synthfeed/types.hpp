#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "synthfeed/util.hpp"

namespace synthfeed::core {

enum class Speaker { human, assistant };

inline const char* speaker_name(Speaker s) {
    return s == Speaker::human ? "human" : "assistant";
}

inline Speaker speaker_from(const std::string& s) {
    if (s == "human") return Speaker::human;
    if (s == "assistant") return Speaker::assistant;
    throw std::invalid_argument("unknown speaker: " + s);
}

struct Turn {
    Speaker speaker = Speaker::human;
    std::string text;

    bool valid() const { return !util::trim(text).empty(); }
    bool operator==(const Turn&) const = default;
};

// turns alternate strictly, first is human
struct Conversation {
    std::vector<Turn> turns;

    void validate() const {
        for (size_t i = 0; i < turns.size(); ++i) {
            if (!turns[i].valid())
                throw std::invalid_argument("turn " + std::to_string(i) + " has empty text");
            Speaker want = (i % 2 == 0) ? Speaker::human : Speaker::assistant;
            if (turns[i].speaker != want)
                throw std::invalid_argument("turn " + std::to_string(i) +
                                            " breaks human/assistant alternation");
        }
    }

    void append(Speaker s, std::string text) {
        Turn t{s, std::move(text)};
        if (!t.valid()) throw std::invalid_argument("appending turn with empty text");
        Speaker want = (turns.size() % 2 == 0) ? Speaker::human : Speaker::assistant;
        if (s != want) throw std::invalid_argument("appending turn breaks alternation");
        turns.push_back(std::move(t));
    }

    bool operator==(const Conversation&) const = default;
};

struct Query {
    std::string id;
    std::string text;
    std::map<std::string, std::string> meta;

    bool operator==(const Query&) const = default;
};

// a point in the (capability, shots, prompt_quality) lattice; quality_rank 1 = best
struct GeneratorConfig {
    std::string name;
    int capability = 1;
    int shots = 0;
    int prompt_quality = 1;
    int quality_rank = 1;

    // strict componentwise dominance on (capability, shots, prompt_quality)
    bool dominates(const GeneratorConfig& o) const {
        bool ge = capability >= o.capability && shots >= o.shots &&
                  prompt_quality >= o.prompt_quality;
        bool strict = capability > o.capability || shots > o.shots ||
                      prompt_quality > o.prompt_quality;
        return ge && strict;
    }
};

inline void validate_config_set(const std::vector<GeneratorConfig>& configs) {
    for (size_t i = 0; i < configs.size(); ++i) {
        if (configs[i].capability < 1 || configs[i].prompt_quality < 1 ||
            configs[i].shots < 0 || configs[i].quality_rank < 1)
            throw std::invalid_argument("config " + configs[i].name + " has invalid ranks");
        for (size_t j = i + 1; j < configs.size(); ++j) {
            if (configs[i].quality_rank == configs[j].quality_rank)
                throw std::invalid_argument("configs " + configs[i].name + " and " +
                                            configs[j].name + " tie on quality_rank");
        }
    }
    // quality_rank must refine the componentwise partial order
    for (const auto& a : configs)
        for (const auto& b : configs)
            if (a.dominates(b) && a.quality_rank >= b.quality_rank)
                throw std::invalid_argument("quality_rank of " + a.name +
                                            " contradicts lattice dominance over " + b.name);
}

struct RankedResponseSet {
    Query query;
    // sorted by quality_rank ascending (best first)
    std::vector<std::pair<GeneratorConfig, std::string>> items;

    void validate() const {
        if (items.size() < 2)
            throw std::invalid_argument("ranked set needs at least 2 items");
        for (size_t i = 1; i < items.size(); ++i)
            if (items[i - 1].first.quality_rank >= items[i].first.quality_rank)
                throw std::invalid_argument("ranked set items not strictly ordered by rank");
    }
};

struct ComparisonPair {
    Query query;
    std::string chosen;
    std::string rejected;
    GeneratorConfig chosen_config;
    GeneratorConfig rejected_config;

    void validate() const {
        if (chosen_config.quality_rank >= rejected_config.quality_rank)
            throw std::invalid_argument("chosen_config must outrank rejected_config");
        if (chosen == rejected)
            throw std::invalid_argument("chosen and rejected responses are identical");
    }

    // equality on the persisted projection: config ranks are generation-time
    // provenance and are not part of the jsonl schema
    bool operator==(const ComparisonPair& o) const {
        return query == o.query && chosen == o.chosen && rejected == o.rejected &&
               chosen_config.name == o.chosen_config.name &&
               rejected_config.name == o.rejected_config.name;
    }
};

enum class DemoSource { self_play, rmsp, external };

inline const char* demo_source_name(DemoSource s) {
    switch (s) {
        case DemoSource::self_play: return "self_play";
        case DemoSource::rmsp: return "rmsp";
        case DemoSource::external: return "external";
    }
    return "external";
}

inline DemoSource demo_source_from(const std::string& s) {
    if (s == "self_play") return DemoSource::self_play;
    if (s == "rmsp") return DemoSource::rmsp;
    if (s == "external") return DemoSource::external;
    throw std::invalid_argument("unknown demonstration source: " + s);
}

struct Demonstration {
    Conversation conversation;
    DemoSource source = DemoSource::external;
    std::optional<std::vector<double>> rm_scores; // one per assistant turn when present

    void validate() const {
        conversation.validate();
        if (conversation.turns.size() < 2)
            throw std::invalid_argument("demonstration needs at least 2 turns");
        if (conversation.turns.back().speaker != Speaker::assistant)
            throw std::invalid_argument("demonstration must end with an assistant turn");
    }

    bool operator==(const Demonstration&) const = default;
};

struct SamplingParams {
    double top_p = 0.9;
    double temperature = 1.0;
    int max_tokens = 384;

    void validate() const {
        if (!(top_p > 0.0 && top_p <= 1.0))
            throw std::invalid_argument("top_p must be in (0,1]");
        if (temperature < 0.0)
            throw std::invalid_argument("temperature must be non-negative");
        if (max_tokens < 1) throw std::invalid_argument("max_tokens must be >= 1");
    }
};

struct RunConfig {
    uint64_t seed = 0;
    SamplingParams sampling;
    int jobs = 1;

    util::Rng stage_rng(std::string_view stage) const {
        return util::Rng(seed).derive(stage);
    }
};

} // namespace synthfeed::core

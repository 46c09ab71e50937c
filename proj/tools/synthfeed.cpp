// synthfeed: desk-scale synthetic-feedback alignment pipeline.
//
// Subcommands cover every pipeline stage (toyworld, mine-queries,
// gen-comparisons, train-rm, simulate, train-sft, train-ppo, eval) plus a
// one-command end-to-end demo (demo-e2e). All artifacts are deterministic
// given --seed: no clocks, no unordered containers, stable parallel merges.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "synthfeed/backend.hpp"
#include "synthfeed/checkpoint.hpp"
#include "synthfeed/evalharness.hpp"
#include "synthfeed/http_backend.hpp"
#include "synthfeed/jsonl.hpp"
#include "synthfeed/pipeline.hpp"
#include "synthfeed/ppo.hpp"
#include "synthfeed/querygen.hpp"
#include "synthfeed/reward_model.hpp"
#include "synthfeed/sft.hpp"
#include "synthfeed/simulate.hpp"
#include "synthfeed/synthcmp.hpp"
#include "synthfeed/tinylm.hpp"
#include "synthfeed/toyworld.hpp"
#include "synthfeed/types.hpp"
#include "synthfeed/util.hpp"

namespace sf = synthfeed;
using nlohmann::json;

namespace {

// ---- shared helpers --------------------------------------------------------------

sf::toyworld::KnowledgeTable load_table(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open table file: " + path);
    json j;
    in >> j;
    return sf::toyworld::table_from_json(j);
}

void save_json(const json& j, const std::string& path) {
    sf::core::write_text(path, j.dump(2) + "\n");
}

json load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open file: " + path);
    json j;
    in >> j;
    return j;
}

void emit_report(const sf::evalharness::EvalReport& r, const std::string& path) {
    if (!path.empty()) save_json(r.to_json(), path);
    std::fputs(r.to_table().c_str(), stdout);
}

std::vector<sf::core::GeneratorConfig> load_configs(const std::string& path) {
    if (path.empty()) return sf::toyworld::default_lattice();
    return sf::synthcmp::configs_from_json(load_json(path));
}

// owns the per-config assistant backends behind a BackendMap
struct LatticeBackends {
    std::map<std::string, sf::toyworld::ToyAssistantBackend> owners;
    sf::synthcmp::BackendMap map;

    LatticeBackends(const sf::toyworld::KnowledgeTable& table,
                    const std::vector<sf::core::GeneratorConfig>& configs) {
        for (const auto& c : configs) owners.emplace(c.name, sf::toyworld::ToyAssistantBackend(table, c));
        for (auto& [name, be] : owners) map[name] = &be;
    }
};

// backend spec: "toy:<config-name>" (needs a table), "lm:<checkpoint>", or "http"
struct BackendBox {
    std::unique_ptr<sf::genbackend::Backend> owned;
    sf::genbackend::Backend* get() const { return owned.get(); }
};

BackendBox make_backend(const std::string& spec, const sf::toyworld::KnowledgeTable* table) {
    BackendBox box;
    if (spec.rfind("toy:", 0) == 0) {
        if (!table) throw std::runtime_error("backend '" + spec + "' needs --table");
        std::string cfg_name = spec.substr(4);
        for (const auto& c : sf::toyworld::default_lattice()) {
            if (c.name == cfg_name) {
                box.owned = std::make_unique<sf::toyworld::ToyAssistantBackend>(*table, c);
                return box;
            }
        }
        throw std::runtime_error("unknown generator config: " + cfg_name);
    }
    if (spec.rfind("lm:", 0) == 0) {
        sf::policytrain::PolicyValue pv = sf::policytrain::load_policy(spec.substr(3));
        box.owned = std::make_unique<sf::genbackend::TinyLmBackend>(std::move(pv.lm));
        return box;
    }
    if (spec == "http") {
        box.owned = std::make_unique<sf::genbackend::HttpBackend>();
        return box;
    }
    throw std::runtime_error("unknown backend spec: " + spec +
                             " (expected toy:<config>, lm:<checkpoint>, or http)");
}

sf::genbackend::LmDims dims_from(int embed, int ffn, int max_seq) {
    sf::genbackend::LmDims d;
    d.embed = embed;
    d.ffn = ffn;
    d.max_seq = max_seq;
    return d;
}

// ---- stage option structs + runners ------------------------------------------------

struct GlobalOpts {
    uint64_t seed = 0;
    int jobs = 1;

    sf::core::RunConfig run() const {
        sf::core::RunConfig r;
        r.seed = seed;
        r.jobs = jobs;
        return r;
    }
};

struct ToyInitOpts {
    int topics = 24;
    int facts_per_topic = 5;
    std::string preset = "default";
    std::string out;
};

json cmd_toyworld_init(const GlobalOpts& g, const ToyInitOpts& o) {
    sf::toyworld::KnowledgeTable table =
        sf::toyworld::make_preset(o.preset, o.topics, o.facts_per_topic, g.seed);
    save_json(sf::toyworld::table_to_json(table), o.out);
    return {{"topics", table.topics.size()},
            {"facts", table.topics.size() * size_t(o.facts_per_topic)},
            {"preset", o.preset}};
}

struct ToyQueriesOpts {
    std::string table;
    int count = 50;
    std::string prefix = "toy";
    std::string out;
};

json cmd_toyworld_queries(const GlobalOpts& g, const ToyQueriesOpts& o) {
    sf::toyworld::KnowledgeTable table = load_table(o.table);
    auto queries = sf::toyworld::make_queries(
        table, o.count, sf::util::Rng(g.seed).derive("queries", o.prefix).seed(), o.prefix);
    sf::core::serialize_dataset(queries, o.out);
    return {{"queries", queries.size()}};
}

struct MineOpts {
    std::string seeds;
    std::string backend = "toy-miner";
    std::string table;
    std::string model; // lm backend checkpoint
    int target = 100;
    int budget_per_query = 50;
    int static_shots = 7;
    int dynamic_shots = 3;
    double rouge_threshold = 0.5;
    std::string out;
    std::string stats_out;
};

json cmd_mine_queries(const GlobalOpts& g, const MineOpts& o) {
    sf::querygen::MinerConfig cfg;
    cfg.seed_queries = sf::core::read_lines(o.seeds);
    cfg.target_count = o.target;
    cfg.budget_per_query = o.budget_per_query;
    cfg.static_shots = o.static_shots;
    cfg.dynamic_shots = o.dynamic_shots;
    cfg.rouge_threshold = o.rouge_threshold;

    std::unique_ptr<sf::genbackend::Backend> owned;
    sf::toyworld::KnowledgeTable table;
    if (o.backend == "toy-miner") {
        if (o.table.empty()) throw std::runtime_error("mine-queries backend toy-miner needs --table");
        table = load_table(o.table);
        owned = std::make_unique<sf::toyworld::ToyQueryMinerBackend>(table);
    } else if (o.backend == "http") {
        owned = std::make_unique<sf::genbackend::HttpBackend>();
    } else if (o.backend == "lm") {
        if (o.model.empty()) throw std::runtime_error("mine-queries backend lm needs --model");
        sf::policytrain::PolicyValue pv = sf::policytrain::load_policy(o.model);
        owned = std::make_unique<sf::genbackend::TinyLmBackend>(std::move(pv.lm));
    } else {
        throw std::runtime_error("unknown mining backend: " + o.backend);
    }

    sf::querygen::MineStats stats;
    std::vector<sf::core::Query> queries;
    std::string partial_error;
    try {
        queries = sf::querygen::mine_queries(cfg, *owned, g.run(), &stats);
    } catch (const sf::querygen::PartialResultError& e) {
        queries = e.accepted();
        partial_error = e.what();
    }
    sf::core::serialize_dataset(queries, o.out);
    json jstats{{"attempts", stats.attempts},
                {"rejected_badword", stats.rejected_badword},
                {"rejected_duplicate", stats.rejected_duplicate},
                {"rejected_empty", stats.rejected_empty},
                {"accepted", queries.size()},
                {"acceptance_rate", stats.acceptance_rate}};
    if (!partial_error.empty()) jstats["partial"] = partial_error;
    if (!o.stats_out.empty()) save_json(jstats, o.stats_out);
    if (!partial_error.empty())
        throw std::runtime_error("mining stopped early: " + partial_error);
    return jstats;
}

struct GenCmpOpts {
    std::string queries;
    std::string table;
    std::string configs; // optional lattice json
    std::string asis_model;
    bool no_hf = false;
    bool no_asis = false;
    std::string out;
    std::string counts_out;
    std::string rejects_out;
};

json cmd_gen_comparisons(const GlobalOpts& g, const GenCmpOpts& o) {
    auto queries = sf::core::deserialize_dataset<sf::core::Query>(o.queries);
    sf::toyworld::KnowledgeTable table = load_table(o.table);
    auto configs = load_configs(o.configs);
    LatticeBackends backends(table, configs);

    sf::synthcmp::BuildOptions opt;
    opt.use_hf = !o.no_hf;
    opt.use_asis = !o.no_asis;
    opt.jobs = g.jobs;
    std::unique_ptr<sf::rm::RewardModel> asis;
    if (opt.use_asis) {
        if (o.asis_model.empty())
            throw std::runtime_error(
                "agreement filtering is on: pass --asis-model or disable with --no-asis");
        asis = std::make_unique<sf::rm::RewardModel>(sf::rm::load_rm(o.asis_model));
    }
    sf::synthcmp::BuildResult built = sf::synthcmp::build_comparison_dataset(
        queries, configs, backends.map, asis.get(), g.run(), opt);
    sf::core::serialize_dataset(built.pairs, o.out);
    if (!o.counts_out.empty()) save_json(built.counts.to_json(), o.counts_out);
    if (!o.rejects_out.empty()) {
        json arr = json::array();
        for (const auto& r : built.rejects)
            arr.push_back({{"query_id", r.query_id}, {"reason", r.reason}});
        save_json(arr, o.rejects_out);
    }
    json counts = built.counts.to_json();
    counts["rejected_queries"] = built.rejects.size();
    return counts;
}

struct TrainRmOpts {
    std::string data;
    std::string base; // optional init checkpoint (backbone)
    std::string out;
    std::string log_out;
    double valid_frac = 0.1;
    int epochs = 2;
    double lr = 1e-3;
    int batch = 16;
    int embed = 64, ffn = 128, max_seq = 256;
    bool asis = false;
    bool from_transcripts = false;
    std::string pooling = "mean";
};

json cmd_train_rm(const GlobalOpts& g, const TrainRmOpts& o) {
    std::vector<sf::core::ComparisonPair> pairs =
        o.from_transcripts ? sf::rm::convert_transcript_file(o.data)
                           : sf::core::deserialize_dataset<sf::core::ComparisonPair>(o.data);
    if (pairs.empty()) throw std::runtime_error("no comparison pairs in " + o.data);

    sf::genbackend::TinyLm backbone =
        o.base.empty()
            ? sf::genbackend::TinyLm(dims_from(o.embed, o.ffn, o.max_seq),
                                     sf::util::Rng(g.seed).derive("rm-init").seed())
            : sf::policytrain::load_policy(o.base).lm;
    sf::rm::RewardModel model(std::move(backbone), sf::rm::pooling_from(o.pooling),
                              o.asis ? sf::rm::Role::asis : sf::rm::Role::main);

    size_t n_valid = std::min(pairs.size() - 1,
                              std::max<size_t>(1, size_t(double(pairs.size()) * o.valid_frac)));
    std::vector<sf::core::ComparisonPair> valid(pairs.end() - ptrdiff_t(n_valid), pairs.end());
    std::vector<sf::core::ComparisonPair> train(pairs.begin(), pairs.end() - ptrdiff_t(n_valid));

    sf::rm::RmTrainConfig cfg;
    cfg.epochs = o.epochs;
    cfg.lr = o.lr;
    cfg.batch = o.batch;
    cfg.max_seq = o.max_seq;
    cfg.seed = sf::util::Rng(g.seed).derive("rm-train").seed();
    cfg.jobs = g.jobs;
    sf::rm::RmTrainLog log = sf::rm::train_rm(model, train, valid, cfg);
    sf::rm::save_rm(model, o.out);

    json jlog{{"train_pairs", train.size()},
              {"valid_pairs", valid.size()},
              {"epoch_valid_accuracy", log.epoch_valid_accuracy},
              {"final_valid_accuracy", log.final_valid_accuracy},
              {"truncated_sequences", model.truncations()}};
    if (!o.log_out.empty()) save_json(jlog, o.log_out);
    return jlog;
}

struct SimulateOpts {
    std::string queries;
    std::string table;
    std::string rm;
    std::string assistant = "toy:C";
    int n = 4;
    int max_turns = 2;
    bool self_play = false;
    std::string out;
    std::string candidates_out;
};

json cmd_simulate(const GlobalOpts& g, const SimulateOpts& o) {
    auto queries = sf::core::deserialize_dataset<sf::core::Query>(o.queries);
    sf::toyworld::KnowledgeTable table = load_table(o.table);
    BackendBox assistant = make_backend(o.assistant, &table);
    sf::toyworld::ToyUserBackend user(table);

    sf::simulate::SimConfig cfg;
    cfg.max_turns = o.max_turns;
    cfg.best_of_n = o.self_play ? 1 : o.n;
    cfg.assistant_backend = assistant.get();
    cfg.user_backend = &user;
    std::unique_ptr<sf::rm::RewardModel> reward;
    if (cfg.best_of_n > 1) {
        if (o.rm.empty()) throw std::runtime_error("best-of-n simulation needs --rm");
        reward = std::make_unique<sf::rm::RewardModel>(sf::rm::load_rm(o.rm));
        cfg.reward = reward.get();
    }
    sf::simulate::DemoBuildResult result = sf::simulate::build_demo_dataset(
        queries, cfg, g.run(), !o.candidates_out.empty());
    sf::core::serialize_dataset(result.demos, o.out);
    if (!o.candidates_out.empty()) {
        std::string text;
        for (const auto& c : result.candidates)
            text += json{{"query_id", c.query_id}, {"turn", c.turn},
                         {"candidate", c.candidate}, {"score", c.score},
                         {"selected", c.selected}, {"text", c.text}}
                        .dump() +
                    "\n";
        sf::core::write_text(o.candidates_out, text);
    }
    json failures = json::array();
    for (const auto& [id, why] : result.failures)
        failures.push_back({{"query_id", id}, {"reason", why}});
    return {{"demos", result.demos.size()},
            {"failures", failures},
            {"best_of_n", cfg.best_of_n},
            {"max_turns", cfg.max_turns}};
}

struct TrainSftOpts {
    std::string demos;
    std::string base; // optional init checkpoint
    std::string out;
    std::string log_out;
    int epochs = 3;
    double lr = 1e-3;
    int batch = 8;
    int embed = 64, ffn = 128, max_seq = 256;
};

json cmd_train_sft(const GlobalOpts& g, const TrainSftOpts& o) {
    auto demos = sf::core::deserialize_dataset<sf::core::Demonstration>(o.demos);
    sf::genbackend::TinyLm policy =
        o.base.empty()
            ? sf::genbackend::TinyLm(dims_from(o.embed, o.ffn, o.max_seq),
                                     sf::util::Rng(g.seed).derive("sft-init").seed())
            : sf::policytrain::load_policy(o.base).lm;
    sf::policytrain::SftConfig cfg;
    cfg.epochs = o.epochs;
    cfg.lr = o.lr;
    cfg.batch = o.batch;
    cfg.max_seq = o.max_seq;
    cfg.seed = sf::util::Rng(g.seed).derive("sft-train").seed();
    sf::policytrain::SftTrainLog log = sf::policytrain::train_sft(policy, demos, cfg);
    sf::policytrain::save_policy(sf::policytrain::PolicyValue(std::move(policy)), o.out);
    json jlog{{"demos", demos.size()},
              {"initial_heldout_loss", log.initial_heldout},
              {"final_heldout_loss", log.final_heldout},
              {"steps", log.steps}};
    if (!o.log_out.empty()) save_json(jlog, o.log_out);
    return jlog;
}

struct TrainPpoOpts {
    std::string policy;
    std::string rm;
    std::string prompts;
    std::string out;
    std::string metrics;
    int episodes = 800;
    int batch = 32;
    int minibatch = 8;
    int prompts_cap = 200;
    int rollout_max_tokens = 128;
    double kl_coeff = 0.05;
    double lr = 3e-4;
    double sample_temperature = 1.0;
    bool kl_per_sequence = false;
};

json cmd_train_ppo(const GlobalOpts& g, const TrainPpoOpts& o) {
    sf::policytrain::PolicyValue policy = sf::policytrain::load_policy(o.policy);
    sf::rm::RewardModel reward = sf::rm::load_rm(o.rm);
    auto queries = sf::core::deserialize_dataset<sf::core::Query>(o.prompts);
    std::vector<std::string> prompts;
    for (const auto& q : queries) prompts.push_back(q.text);

    sf::policytrain::PpoConfig cfg;
    cfg.episodes = o.episodes;
    cfg.batch = o.batch;
    cfg.minibatch = o.minibatch;
    cfg.prompts = o.prompts_cap;
    cfg.rollout_max_tokens = o.rollout_max_tokens;
    cfg.kl_coeff = o.kl_coeff;
    cfg.lr = o.lr;
    cfg.sample_temperature = o.sample_temperature;
    cfg.kl_per_sequence = o.kl_per_sequence;
    cfg.seed = sf::util::Rng(g.seed).derive("ppo").seed();
    cfg.jobs = g.jobs;
    sf::policytrain::RlsfResult result =
        sf::policytrain::train_rlsf(std::move(policy), reward, prompts, cfg, o.metrics);
    sf::policytrain::save_policy(result.policy, o.out);
    json out{{"iterations", result.metrics.size()}, {"episodes", cfg.episodes}};
    if (!result.metrics.empty()) {
        out["first_mean_reward"] = result.metrics.front().mean_reward;
        out["last_mean_reward"] = result.metrics.back().mean_reward;
        out["last_mean_kl"] = result.metrics.back().mean_kl;
    }
    return out;
}

// ---- eval subcommands ---------------------------------------------------------------

struct EvalRmAccOpts {
    std::string rm;
    std::string data;
    std::string report;
};

json cmd_eval_rm_accuracy(const GlobalOpts& g, const EvalRmAccOpts& o) {
    sf::rm::RewardModel model = sf::rm::load_rm(o.rm);
    auto pairs = sf::core::deserialize_dataset<sf::core::ComparisonPair>(o.data);
    sf::evalharness::EvalReport r =
        sf::evalharness::rm_accuracy_report(model, pairs, g.jobs, g.seed);
    emit_report(r, o.report);
    return r.to_json();
}

struct EvalAblationOpts {
    std::string table;
    std::string queries;
    std::string arms = "full,no_hf,no_asis";
    int rm_epochs = 2;
    double rm_lr = 1e-3;
    double min_gap = 0.08;
    int embed = 64, ffn = 128, max_seq = 256;
    std::string report;
};

json cmd_eval_ablation(const GlobalOpts& g, const EvalAblationOpts& o) {
    sf::toyworld::KnowledgeTable table = load_table(o.table);
    auto queries = sf::core::deserialize_dataset<sf::core::Query>(o.queries);
    auto configs = sf::toyworld::default_lattice();
    LatticeBackends backends(table, configs);

    sf::evalharness::AblationOptions opt;
    opt.arms.clear();
    for (size_t at = 0; at < o.arms.size();) {
        size_t comma = o.arms.find(',', at);
        if (comma == std::string::npos) comma = o.arms.size();
        if (comma > at) opt.arms.push_back(o.arms.substr(at, comma - at));
        at = comma + 1;
    }
    opt.rm_cfg.epochs = o.rm_epochs;
    opt.rm_cfg.lr = o.rm_lr;
    opt.asis_cfg.epochs = o.rm_epochs;
    opt.oracle.min_gap = o.min_gap;
    opt.dims = dims_from(o.embed, o.ffn, o.max_seq);
    sf::evalharness::EvalReport r =
        sf::evalharness::ablation_run(queries, configs, backends.map, table, g.run(), opt);
    emit_report(r, o.report);
    return r.to_json();
}

struct EvalBonOpts {
    std::string table;
    std::string queries;
    std::string rm;
    std::string assistant = "toy:C";
    std::string ns = "1,2,4,8";
    std::string report;
};

json cmd_eval_bon(const GlobalOpts& g, const EvalBonOpts& o) {
    sf::toyworld::KnowledgeTable table = load_table(o.table);
    auto queries = sf::core::deserialize_dataset<sf::core::Query>(o.queries);
    sf::rm::RewardModel model = sf::rm::load_rm(o.rm);
    BackendBox assistant = make_backend(o.assistant, &table);
    std::vector<int> ns;
    for (size_t at = 0; at < o.ns.size();) {
        size_t comma = o.ns.find(',', at);
        if (comma == std::string::npos) comma = o.ns.size();
        if (comma > at) ns.push_back(std::stoi(o.ns.substr(at, comma - at)));
        at = comma + 1;
    }
    sf::evalharness::EvalReport r = sf::evalharness::bon_sweep(
        queries, *assistant.get(), model, table, g.run(), ns);
    emit_report(r, o.report);
    return r.to_json();
}

struct EvalMcOpts {
    std::string policy;
    std::string items;
    bool no_length_norm = false;
    std::string report;
};

json cmd_eval_mc(const GlobalOpts& g, const EvalMcOpts& o) {
    sf::policytrain::PolicyValue pv = sf::policytrain::load_policy(o.policy);
    auto items = sf::evalharness::read_mc_items(o.items);
    double acc = sf::evalharness::mc_eval(pv.lm, items, !o.no_length_norm, g.jobs);
    sf::evalharness::EvalReport r;
    r.name = "mc";
    r.n = int64_t(items.size());
    r.seed = g.seed;
    r.metrics["accuracy"] = acc;
    r.metrics["length_normalized"] = o.no_length_norm ? 0.0 : 1.0;
    r.config_fingerprint = sf::evalharness::fingerprint_of(
        {{"items", items.size()}, {"length_norm", !o.no_length_norm}});
    emit_report(r, o.report);
    return r.to_json();
}

struct EvalPpoCurveOpts {
    std::string metrics;
    std::string report;
};

json cmd_eval_ppo_curve(const GlobalOpts&, const EvalPpoCurveOpts& o) {
    sf::evalharness::EvalReport r = sf::evalharness::ppo_curve_report(o.metrics);
    emit_report(r, o.report);
    return r.to_json();
}

// ---- demo-e2e -------------------------------------------------------------------------

struct DemoOpts {
    std::string out_dir;
    std::string from; // resume from this stage (earlier stages skipped)
};

int cmd_demo_e2e(const GlobalOpts& g, const DemoOpts& o) {
    namespace fs = std::filesystem;
    fs::create_directories(o.out_dir);
    auto at = [&](const std::string& name) { return (fs::path(o.out_dir) / name).string(); };

    // desk-scale sizes chosen so the whole run finishes in minutes on one core
    const int kTopics = 16, kFacts = 5;
    const int kMineTarget = 32, kSeedQueries = 12;
    const int kExternalQueries = 24, kValidQueries = 16, kRlPrompts = 16;
    const int kRmEpochs = 2, kSftEpochs = 2;
    const int kPpoEpisodes = 96, kPpoBatch = 16, kPpoTokens = 64;

    sf::pipeline::PipelineManifest m;
    auto fp = [](const json& j) { return sf::evalharness::fingerprint_of(j); };

    m.stages.push_back(sf::pipeline::Stage{
        "toyworld-init",
        {},
        {at("table.json"), at("seeds.txt"), at("queries_external.jsonl"),
         at("queries_valid.jsonl"), at("prompts_rl.jsonl")},
        fp({{"topics", kTopics}, {"facts", kFacts}}),
        [&](json& counts) {
            counts["init"] = cmd_toyworld_init(g, {kTopics, kFacts, "default", at("table.json")});
            sf::toyworld::KnowledgeTable table = load_table(at("table.json"));
            std::string seeds;
            auto seed_queries = sf::toyworld::make_queries(
                table, kSeedQueries, sf::util::Rng(g.seed).derive("seeds").seed(), "seed");
            for (const auto& q : seed_queries) seeds += q.text + "\n";
            sf::core::write_text(at("seeds.txt"), seeds);
            counts["external"] = cmd_toyworld_queries(
                g, {at("table.json"), kExternalQueries, "ext", at("queries_external.jsonl")});
            counts["valid"] = cmd_toyworld_queries(
                g, {at("table.json"), kValidQueries, "val", at("queries_valid.jsonl")});
            counts["rl"] = cmd_toyworld_queries(
                g, {at("table.json"), kRlPrompts, "rl", at("prompts_rl.jsonl")});
        }});

    m.stages.push_back(sf::pipeline::Stage{
        "mine-queries",
        {at("table.json"), at("seeds.txt")},
        {at("queries_mined.jsonl"), at("mine_stats.json")},
        fp({{"target", kMineTarget}, {"rouge", 0.9}}),
        [&](json& counts) {
            MineOpts mo;
            mo.seeds = at("seeds.txt");
            mo.table = at("table.json");
            mo.target = kMineTarget;
            // the toy world's templated queries sit ~0.75-0.83 similar by
            // construction; 0.9 still rejects true repeats
            mo.rouge_threshold = 0.9;
            mo.out = at("queries_mined.jsonl");
            mo.stats_out = at("mine_stats.json");
            counts = cmd_mine_queries(g, mo);
        }});

    m.stages.push_back(sf::pipeline::Stage{
        "external-pairs",
        {at("table.json"), at("queries_external.jsonl"), at("queries_valid.jsonl")},
        {at("pairs_external.jsonl"), at("pairs_valid.jsonl")},
        fp({{"min_gap", 0.08}}),
        [&](json& counts) {
            sf::toyworld::KnowledgeTable table = load_table(at("table.json"));
            auto configs = sf::toyworld::default_lattice();
            LatticeBackends backends(table, configs);
            auto ext = sf::core::deserialize_dataset<sf::core::Query>(at("queries_external.jsonl"));
            auto val = sf::core::deserialize_dataset<sf::core::Query>(at("queries_valid.jsonl"));
            auto ext_pairs = sf::evalharness::oracle_labeled_pairs(ext, configs, backends.map,
                                                                   table, g.run());
            auto val_pairs = sf::evalharness::oracle_labeled_pairs(val, configs, backends.map,
                                                                   table, g.run());
            sf::core::serialize_dataset(ext_pairs, at("pairs_external.jsonl"));
            sf::core::serialize_dataset(val_pairs, at("pairs_valid.jsonl"));
            counts["external_pairs"] = ext_pairs.size();
            counts["valid_pairs"] = val_pairs.size();
        }});

    m.stages.push_back(sf::pipeline::Stage{
        "train-asis-rm",
        {at("pairs_external.jsonl")},
        {at("asis.ckpt")},
        fp({{"epochs", kRmEpochs}}),
        [&](json& counts) {
            TrainRmOpts ro;
            ro.data = at("pairs_external.jsonl");
            ro.out = at("asis.ckpt");
            ro.epochs = kRmEpochs;
            ro.asis = true;
            counts = cmd_train_rm(g, ro);
        }});

    m.stages.push_back(sf::pipeline::Stage{
        "gen-comparisons",
        {at("table.json"), at("queries_mined.jsonl"), at("asis.ckpt")},
        {at("pairs.jsonl"), at("counts.json")},
        fp({{"hf", true}, {"asis", true}}),
        [&](json& counts) {
            GenCmpOpts co;
            co.queries = at("queries_mined.jsonl");
            co.table = at("table.json");
            co.asis_model = at("asis.ckpt");
            co.out = at("pairs.jsonl");
            co.counts_out = at("counts.json");
            co.rejects_out = at("rejects.json");
            counts = cmd_gen_comparisons(g, co);
        }});

    m.stages.push_back(sf::pipeline::Stage{
        "train-rm",
        {at("pairs.jsonl")},
        {at("rm.ckpt"), at("rm_log.json")},
        fp({{"epochs", kRmEpochs}}),
        [&](json& counts) {
            TrainRmOpts ro;
            ro.data = at("pairs.jsonl");
            ro.out = at("rm.ckpt");
            ro.log_out = at("rm_log.json");
            ro.epochs = kRmEpochs;
            counts = cmd_train_rm(g, ro);
        }});

    m.stages.push_back(sf::pipeline::Stage{
        "eval-rm",
        {at("rm.ckpt"), at("pairs_valid.jsonl")},
        {at("report_rm.json")},
        fp({{"eval", "rm-accuracy"}}),
        [&](json& counts) {
            counts = cmd_eval_rm_accuracy(
                g, {at("rm.ckpt"), at("pairs_valid.jsonl"), at("report_rm.json")});
        }});

    m.stages.push_back(sf::pipeline::Stage{
        "simulate",
        {at("table.json"), at("queries_mined.jsonl"), at("rm.ckpt")},
        {at("demos.jsonl")},
        fp({{"n", 4}, {"turns", 2}}),
        [&](json& counts) {
            SimulateOpts so;
            so.queries = at("queries_mined.jsonl");
            so.table = at("table.json");
            so.rm = at("rm.ckpt");
            so.out = at("demos.jsonl");
            counts = cmd_simulate(g, so);
        }});

    m.stages.push_back(sf::pipeline::Stage{
        "train-sft",
        {at("demos.jsonl")},
        {at("policy_sft.ckpt"), at("sft_log.json")},
        fp({{"epochs", kSftEpochs}}),
        [&](json& counts) {
            TrainSftOpts so;
            so.demos = at("demos.jsonl");
            so.out = at("policy_sft.ckpt");
            so.log_out = at("sft_log.json");
            so.epochs = kSftEpochs;
            counts = cmd_train_sft(g, so);
        }});

    m.stages.push_back(sf::pipeline::Stage{
        "train-ppo",
        {at("policy_sft.ckpt"), at("rm.ckpt"), at("prompts_rl.jsonl")},
        {at("policy_rl.ckpt"), at("ppo_metrics.jsonl")},
        fp({{"episodes", kPpoEpisodes}, {"batch", kPpoBatch}}),
        [&](json& counts) {
            TrainPpoOpts po;
            po.policy = at("policy_sft.ckpt");
            po.rm = at("rm.ckpt");
            po.prompts = at("prompts_rl.jsonl");
            po.out = at("policy_rl.ckpt");
            po.metrics = at("ppo_metrics.jsonl");
            po.episodes = kPpoEpisodes;
            po.batch = kPpoBatch;
            po.minibatch = 8;
            po.rollout_max_tokens = kPpoTokens;
            counts = cmd_train_ppo(g, po);
        }});

    m.stages.push_back(sf::pipeline::Stage{
        "eval-bon",
        {at("table.json"), at("queries_valid.jsonl"), at("rm.ckpt")},
        {at("report_bon.json")},
        fp({{"ns", "1,2,4,8"}}),
        [&](json& counts) {
            EvalBonOpts bo;
            bo.table = at("table.json");
            bo.queries = at("queries_valid.jsonl");
            bo.rm = at("rm.ckpt");
            bo.report = at("report_bon.json");
            counts = cmd_eval_bon(g, bo);
        }});

    m.stages.push_back(sf::pipeline::Stage{
        "eval-ppo-curve",
        {at("ppo_metrics.jsonl")},
        {at("report_ppo.json")},
        fp({{"eval", "ppo-curve"}}),
        [&](json& counts) {
            counts = cmd_eval_ppo_curve(g, {at("ppo_metrics.jsonl"), at("report_ppo.json")});
        }});

    if (!o.from.empty()) {
        size_t keep = m.stages.size();
        for (size_t i = 0; i < m.stages.size(); ++i)
            if (m.stages[i].name == o.from) {
                keep = i;
                break;
            }
        if (keep == m.stages.size())
            throw std::runtime_error("unknown pipeline stage: " + o.from);
        m.stages.erase(m.stages.begin(), m.stages.begin() + ptrdiff_t(keep));
    }

    sf::pipeline::PipelineResult result = sf::pipeline::run_pipeline(m, at("summary.json"));
    if (!result.ok) {
        std::fprintf(stderr, "error: %s\n", result.error.c_str());
        return 1;
    }
    std::printf("pipeline complete: %zu stages, summary at %s\n", m.stages.size(),
                at("summary.json").c_str());
    return 0;
}

// env var names: SYNTHFEED_<SUBCOMMAND...>_<FLAG>, e.g. SYNTHFEED_TRAIN_RM_EPOCHS
void apply_env_names(CLI::App* app, std::string prefix) {
    for (CLI::Option* opt : app->get_options()) {
        if (opt->get_lnames().empty()) continue;
        std::string name = opt->get_lnames()[0];
        if (name == "help") continue;
        std::string env = prefix + "_";
        for (char c : name) env += c == '-' ? '_' : char(std::toupper((unsigned char)c));
        opt->envname(env);
    }
    for (CLI::App* sub : app->get_subcommands([](const CLI::App*) { return true; })) {
        std::string name = sub->get_name();
        std::string part;
        for (char c : name) part += c == '-' ? '_' : char(std::toupper((unsigned char)c));
        apply_env_names(sub, prefix + "_" + part);
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale synthetic-feedback alignment pipeline"};
    app.require_subcommand(1);
    app.set_config("--config", "", "INI config file (sections per subcommand)");

    GlobalOpts g;
    app.add_option("--seed", g.seed, "run seed (drives every stage RNG)");
    app.add_option("--jobs", g.jobs, "worker threads for parallel stages");

    ToyInitOpts toy_init;
    ToyQueriesOpts toy_queries;
    MineOpts mine;
    GenCmpOpts gencmp;
    TrainRmOpts train_rm;
    SimulateOpts simulate;
    TrainSftOpts train_sft;
    TrainPpoOpts train_ppo;
    EvalRmAccOpts eval_rm;
    EvalAblationOpts eval_ablation;
    EvalBonOpts eval_bon;
    EvalMcOpts eval_mc;
    EvalPpoCurveOpts eval_curve;
    DemoOpts demo;

    CLI::App* toy = app.add_subcommand("toyworld", "toy world assets");
    toy->require_subcommand(1);
    CLI::App* tinit = toy->add_subcommand("init", "generate a knowledge table");
    tinit->add_option("--topics", toy_init.topics, "number of topics");
    tinit->add_option("--facts-per-topic", toy_init.facts_per_topic, "facts per topic");
    tinit->add_option("--preset", toy_init.preset,
                      "default | length_decorrelated | noisy");
    tinit->add_option("--out", toy_init.out, "output table json")->required();
    CLI::App* tq = toy->add_subcommand("queries", "sample queries from a table");
    tq->add_option("--table", toy_queries.table, "table json")->required();
    tq->add_option("--count", toy_queries.count, "number of queries");
    tq->add_option("--prefix", toy_queries.prefix, "query id prefix");
    tq->add_option("--out", toy_queries.out, "output queries jsonl")->required();

    CLI::App* mq = app.add_subcommand("mine-queries", "few-shot query mining");
    mq->add_option("--seeds", mine.seeds, "seed query file, one per line")->required();
    mq->add_option("--backend", mine.backend, "toy-miner | lm | http");
    mq->add_option("--table", mine.table, "table json (toy-miner backend)");
    mq->add_option("--model", mine.model, "checkpoint (lm backend)");
    mq->add_option("--target", mine.target, "queries to accept");
    mq->add_option("--budget-per-query", mine.budget_per_query, "attempt budget multiplier");
    mq->add_option("--static-shots", mine.static_shots, "fixed few-shot examples");
    mq->add_option("--dynamic-shots", mine.dynamic_shots, "resampled few-shot examples");
    mq->add_option("--rouge-threshold", mine.rouge_threshold, "dedup similarity bound");
    mq->add_option("--out", mine.out, "output queries jsonl")->required();
    mq->add_option("--stats-out", mine.stats_out, "mining stats json");

    CLI::App* gc = app.add_subcommand("gen-comparisons", "ranked comparisons from the lattice");
    gc->add_option("--queries", gencmp.queries, "queries jsonl")->required();
    gc->add_option("--table", gencmp.table, "table json")->required();
    gc->add_option("--configs", gencmp.configs, "generator lattice json (default built-in)");
    gc->add_option("--asis-model", gencmp.asis_model, "agreement-filter checkpoint");
    gc->add_flag("--no-hf", gencmp.no_hf, "disable the heuristic filter");
    gc->add_flag("--no-asis", gencmp.no_asis, "disable the agreement filter");
    gc->add_option("--out", gencmp.out, "output pairs jsonl")->required();
    gc->add_option("--counts-out", gencmp.counts_out, "stage counts json");
    gc->add_option("--rejects-out", gencmp.rejects_out, "rejected queries json");

    CLI::App* tr = app.add_subcommand("train-rm", "train a reward model on comparisons");
    tr->add_option("--data", train_rm.data, "pairs jsonl (or transcript jsonl)")->required();
    tr->add_option("--base", train_rm.base, "init backbone from checkpoint");
    tr->add_option("--out", train_rm.out, "output checkpoint")->required();
    tr->add_option("--log-out", train_rm.log_out, "training log json");
    tr->add_option("--valid-frac", train_rm.valid_frac, "tail fraction held out");
    tr->add_option("--epochs", train_rm.epochs, "training epochs");
    tr->add_option("--lr", train_rm.lr, "learning rate");
    tr->add_option("--batch", train_rm.batch, "batch size");
    tr->add_option("--embed", train_rm.embed, "embedding width (fresh init)");
    tr->add_option("--ffn", train_rm.ffn, "feed-forward width (fresh init)");
    tr->add_option("--max-seq", train_rm.max_seq, "max sequence length");
    tr->add_option("--pooling", train_rm.pooling, "mean | last_token");
    tr->add_flag("--asis", train_rm.asis, "train an agreement-filter model");
    tr->add_flag("--from-transcripts", train_rm.from_transcripts,
                 "input is chosen/rejected transcript jsonl");

    CLI::App* sim = app.add_subcommand("simulate", "synthesize demonstrations");
    sim->add_option("--queries", simulate.queries, "queries jsonl")->required();
    sim->add_option("--table", simulate.table, "table json")->required();
    sim->add_option("--rm", simulate.rm, "reward model checkpoint (best-of-n)");
    sim->add_option("--assistant", simulate.assistant, "toy:<config> | lm:<ckpt> | http");
    sim->add_option("--n", simulate.n, "candidates per assistant turn");
    sim->add_option("--max-turns", simulate.max_turns, "assistant turns per conversation");
    sim->add_flag("--self-play", simulate.self_play, "no reward guidance (n = 1)");
    sim->add_option("--out", simulate.out, "output demos jsonl")->required();
    sim->add_option("--candidates-out", simulate.candidates_out, "candidate log jsonl");

    CLI::App* ts = app.add_subcommand("train-sft", "supervised fine-tuning on demos");
    ts->add_option("--demos", train_sft.demos, "demos jsonl")->required();
    ts->add_option("--base", train_sft.base, "init policy from checkpoint");
    ts->add_option("--out", train_sft.out, "output checkpoint")->required();
    ts->add_option("--log-out", train_sft.log_out, "training log json");
    ts->add_option("--epochs", train_sft.epochs, "training epochs");
    ts->add_option("--lr", train_sft.lr, "learning rate");
    ts->add_option("--batch", train_sft.batch, "batch size");
    ts->add_option("--embed", train_sft.embed, "embedding width (fresh init)");
    ts->add_option("--ffn", train_sft.ffn, "feed-forward width (fresh init)");
    ts->add_option("--max-seq", train_sft.max_seq, "max sequence length");

    CLI::App* tp = app.add_subcommand("train-ppo", "policy optimization against the reward model");
    tp->add_option("--policy", train_ppo.policy, "policy checkpoint")->required();
    tp->add_option("--rm", train_ppo.rm, "reward model checkpoint")->required();
    tp->add_option("--prompts", train_ppo.prompts, "prompt queries jsonl")->required();
    tp->add_option("--out", train_ppo.out, "output checkpoint")->required();
    tp->add_option("--metrics", train_ppo.metrics, "metrics jsonl")->required();
    tp->add_option("--episodes", train_ppo.episodes, "episode budget");
    tp->add_option("--batch", train_ppo.batch, "episodes per iteration");
    tp->add_option("--minibatch", train_ppo.minibatch, "episodes per update step");
    tp->add_option("--prompts-cap", train_ppo.prompts_cap, "max prompts used");
    tp->add_option("--rollout-max-tokens", train_ppo.rollout_max_tokens, "response budget");
    tp->add_option("--kl-coeff", train_ppo.kl_coeff, "per-token KL penalty weight");
    tp->add_option("--lr", train_ppo.lr, "learning rate");
    tp->add_option("--sample-temperature", train_ppo.sample_temperature, "rollout temperature");
    tp->add_flag("--kl-per-sequence", train_ppo.kl_per_sequence,
                 "fold the KL penalty into the terminal step");

    CLI::App* ev = app.add_subcommand("eval", "measurement suite");
    ev->require_subcommand(1);
    CLI::App* era = ev->add_subcommand("rm-accuracy", "pairwise accuracy with baselines");
    era->add_option("--rm", eval_rm.rm, "reward model checkpoint")->required();
    era->add_option("--data", eval_rm.data, "pairs jsonl")->required();
    era->add_option("--report", eval_rm.report, "report json");
    CLI::App* eab = ev->add_subcommand("ablation", "filter-arm comparison");
    eab->add_option("--table", eval_ablation.table, "table json")->required();
    eab->add_option("--queries", eval_ablation.queries, "queries jsonl")->required();
    eab->add_option("--arms", eval_ablation.arms, "comma list: full,no_hf,no_asis");
    eab->add_option("--rm-epochs", eval_ablation.rm_epochs, "per-arm training epochs");
    eab->add_option("--rm-lr", eval_ablation.rm_lr, "per-arm learning rate");
    eab->add_option("--min-gap", eval_ablation.min_gap, "oracle gap for labeled pairs");
    eab->add_option("--embed", eval_ablation.embed, "model width");
    eab->add_option("--ffn", eval_ablation.ffn, "feed-forward width");
    eab->add_option("--max-seq", eval_ablation.max_seq, "max sequence length");
    eab->add_option("--report", eval_ablation.report, "report json");
    CLI::App* ebn = ev->add_subcommand("bon-sweep", "best-of-n candidate sweep");
    ebn->add_option("--table", eval_bon.table, "table json")->required();
    ebn->add_option("--queries", eval_bon.queries, "queries jsonl")->required();
    ebn->add_option("--rm", eval_bon.rm, "reward model checkpoint")->required();
    ebn->add_option("--assistant", eval_bon.assistant, "candidate backend");
    ebn->add_option("--ns", eval_bon.ns, "comma list of N values");
    ebn->add_option("--report", eval_bon.report, "report json");
    CLI::App* emc = ev->add_subcommand("mc", "likelihood multiple choice");
    emc->add_option("--policy", eval_mc.policy, "policy checkpoint")->required();
    emc->add_option("--items", eval_mc.items, "items jsonl")->required();
    emc->add_flag("--no-length-norm", eval_mc.no_length_norm, "raw log-likelihood scoring");
    emc->add_option("--report", eval_mc.report, "report json");
    CLI::App* epc = ev->add_subcommand("ppo-curve", "learning-curve digest");
    epc->add_option("--metrics", eval_curve.metrics, "metrics jsonl")->required();
    epc->add_option("--report", eval_curve.report, "report json");

    CLI::App* de = app.add_subcommand("demo-e2e", "full pipeline on the toy world");
    de->add_option("--out-dir", demo.out_dir, "artifact directory")->required();
    de->add_option("--from", demo.from, "resume from this stage");

    apply_env_names(&app, "SYNTHFEED");

    CLI11_PARSE(app, argc, argv);

    try {
        if (tinit->parsed()) {
            json c = cmd_toyworld_init(g, toy_init);
            std::printf("%s\n", c.dump().c_str());
        } else if (tq->parsed()) {
            json c = cmd_toyworld_queries(g, toy_queries);
            std::printf("%s\n", c.dump().c_str());
        } else if (mq->parsed()) {
            json c = cmd_mine_queries(g, mine);
            std::printf("%s\n", c.dump().c_str());
        } else if (gc->parsed()) {
            json c = cmd_gen_comparisons(g, gencmp);
            std::printf("%s\n", c.dump().c_str());
        } else if (tr->parsed()) {
            json c = cmd_train_rm(g, train_rm);
            std::printf("%s\n", c.dump().c_str());
        } else if (sim->parsed()) {
            json c = cmd_simulate(g, simulate);
            std::printf("%s\n", c.dump().c_str());
        } else if (ts->parsed()) {
            json c = cmd_train_sft(g, train_sft);
            std::printf("%s\n", c.dump().c_str());
        } else if (tp->parsed()) {
            json c = cmd_train_ppo(g, train_ppo);
            std::printf("%s\n", c.dump().c_str());
        } else if (era->parsed()) cmd_eval_rm_accuracy(g, eval_rm);
        else if (eab->parsed()) cmd_eval_ablation(g, eval_ablation);
        else if (ebn->parsed()) cmd_eval_bon(g, eval_bon);
        else if (emc->parsed()) cmd_eval_mc(g, eval_mc);
        else if (epc->parsed()) cmd_eval_ppo_curve(g, eval_curve);
        else if (de->parsed()) return cmd_demo_e2e(g, demo);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}

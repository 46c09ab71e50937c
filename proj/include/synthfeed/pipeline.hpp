#pragma once

#include <filesystem>
#include <functional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "synthfeed/jsonl.hpp"
#include "synthfeed/util.hpp"

namespace synthfeed::pipeline {

// One pipeline step: declared inputs are checked for existence before the body
// runs, declared outputs document what it writes, and the fingerprint pins the
// configuration that produced them.
struct Stage {
    std::string name;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
    std::string config_fingerprint;
    // fills a json object with stage counts/metric highlights; throws on failure
    std::function<void(nlohmann::json&)> body;
};

struct PipelineManifest {
    std::vector<Stage> stages;

    void validate() const {
        if (stages.empty()) throw std::invalid_argument("pipeline has no stages");
        std::set<std::string> names;
        for (const auto& s : stages) {
            if (s.name.empty()) throw std::invalid_argument("pipeline stage without a name");
            if (!names.insert(s.name).second)
                throw std::invalid_argument("duplicate pipeline stage: " + s.name);
            if (!s.body) throw std::invalid_argument("stage " + s.name + " has no body");
        }
    }

    // declaration only — bodies are not serializable
    nlohmann::json to_json() const {
        nlohmann::json out = nlohmann::json::array();
        for (const auto& s : stages)
            out.push_back({{"name", s.name},
                           {"inputs", s.inputs},
                           {"outputs", s.outputs},
                           {"config_fingerprint", s.config_fingerprint}});
        return {{"stages", out}};
    }
};

struct PipelineResult {
    bool ok = true;
    std::string failed_stage;
    std::string error;
    nlohmann::json summary; // per-stage counts, in execution order
};

// Runs stages in order, stopping at the first failure. A missing declared
// input is a precondition error naming the stage; the summary (written to
// summary_path when given) records per-stage counts and carries no clocks or
// timestamps, so reruns with the same inputs are byte-identical.
inline PipelineResult run_pipeline(const PipelineManifest& manifest,
                                   const std::string& summary_path = "") {
    manifest.validate();
    PipelineResult result;
    nlohmann::json stages = nlohmann::json::array();

    auto finish = [&]() -> PipelineResult& {
        result.summary = {{"ok", result.ok}, {"stages", stages}};
        if (!result.ok) {
            result.summary["failed_stage"] = result.failed_stage;
            result.summary["error"] = result.error;
        }
        if (!summary_path.empty())
            core::write_text(summary_path, result.summary.dump(2) + "\n");
        return result;
    };

    for (const auto& stage : manifest.stages) {
        for (const auto& input : stage.inputs) {
            if (!std::filesystem::exists(input)) {
                result.ok = false;
                result.failed_stage = stage.name;
                result.error = "stage " + stage.name + ": missing input " + input;
                return finish();
            }
        }
        nlohmann::json counts = nlohmann::json::object();
        try {
            stage.body(counts);
        } catch (const std::exception& e) {
            result.ok = false;
            result.failed_stage = stage.name;
            result.error = "stage " + stage.name + ": " + e.what();
            return finish();
        }
        stages.push_back({{"name", stage.name},
                          {"config_fingerprint", stage.config_fingerprint},
                          {"counts", counts}});
    }
    return finish();
}

} // namespace synthfeed::pipeline

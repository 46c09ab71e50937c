#pragma once

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "synthfeed/types.hpp"

namespace synthfeed::core {

using nlohmann::json;

// ---- record <-> json -------------------------------------------------------

inline json to_json(const Query& q) {
    json meta = json::object();
    for (const auto& [k, v] : q.meta) meta[k] = v;
    return json{{"id", q.id}, {"text", q.text}, {"meta", meta}};
}

inline json to_json(const ComparisonPair& p) {
    return json{{"query_id", p.query.id},
                {"query", p.query.text},
                {"chosen", p.chosen},
                {"rejected", p.rejected},
                {"chosen_config", p.chosen_config.name},
                {"rejected_config", p.rejected_config.name}};
}

inline json to_json(const Demonstration& d) {
    json turns = json::array();
    for (const auto& t : d.conversation.turns)
        turns.push_back({{"speaker", speaker_name(t.speaker)}, {"text", t.text}});
    json scores;
    if (d.rm_scores) {
        scores = json::array();
        for (double s : *d.rm_scores) scores.push_back(s);
    } else {
        scores = nullptr;
    }
    return json{{"turns", turns},
                {"source", demo_source_name(d.source)},
                {"rm_scores", scores}};
}

inline void from_json_record(const json& j, Query& q) {
    q.id = j.at("id").get<std::string>();
    q.text = j.at("text").get<std::string>();
    q.meta.clear();
    if (j.contains("meta") && !j.at("meta").is_null())
        for (auto it = j.at("meta").begin(); it != j.at("meta").end(); ++it)
            q.meta[it.key()] = it.value().get<std::string>();
}

inline void from_json_record(const json& j, ComparisonPair& p) {
    p.query.id = j.at("query_id").get<std::string>();
    p.query.text = j.at("query").get<std::string>();
    p.chosen = j.at("chosen").get<std::string>();
    p.rejected = j.at("rejected").get<std::string>();
    // the file schema keeps config names only; ranks 1/2 restate chosen > rejected
    p.chosen_config = GeneratorConfig{j.at("chosen_config").get<std::string>(), 1, 0, 1, 1};
    p.rejected_config = GeneratorConfig{j.at("rejected_config").get<std::string>(), 1, 0, 1, 2};
}

inline void from_json_record(const json& j, Demonstration& d) {
    d.conversation.turns.clear();
    for (const auto& jt : j.at("turns"))
        d.conversation.turns.push_back(
            Turn{speaker_from(jt.at("speaker").get<std::string>()),
                 jt.at("text").get<std::string>()});
    d.source = demo_source_from(j.at("source").get<std::string>());
    if (j.contains("rm_scores") && !j.at("rm_scores").is_null())
        d.rm_scores = j.at("rm_scores").get<std::vector<double>>();
    else
        d.rm_scores.reset();
}

// ---- per-kind invariant checks at load time ---------------------------------

namespace detail {

struct DatasetState {
    std::set<std::string> seen_query_ids;
};

inline void check_loaded(Query& q, DatasetState& st) {
    if (q.id.empty()) throw std::invalid_argument("query id is empty");
    if (!st.seen_query_ids.insert(q.id).second)
        throw std::invalid_argument("duplicate query id: " + q.id);
}

inline void check_loaded(ComparisonPair& p, DatasetState&) { p.validate(); }

inline void check_loaded(Demonstration& d, DatasetState&) { d.validate(); }

} // namespace detail

// ---- jsonl io ----------------------------------------------------------------

template <typename Record>
void serialize_dataset(const std::vector<Record>& records, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    for (const auto& r : records) {
        out << to_json(r).dump() << "\n";
        if (!out) throw std::runtime_error("write failure: " + path);
    }
    out.flush();
    if (!out) throw std::runtime_error("write failure: " + path);
}

template <typename Record>
std::vector<Record> deserialize_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for reading: " + path);
    std::vector<Record> records;
    detail::DatasetState st;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) {
            if (in.peek() == EOF) break; // trailing newline
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": empty line");
        }
        try {
            Record r;
            from_json_record(json::parse(line), r);
            detail::check_loaded(r, st);
            records.push_back(std::move(r));
        } catch (const std::exception& e) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return records;
}

inline std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for reading: " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) lines.push_back(line);
    }
    return lines;
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << text;
    if (!out) throw std::runtime_error("write failure: " + path);
}

} // namespace synthfeed::core

// Shared test fixtures: scratch directories, tiny model factories, and a
// subprocess runner for CLI tests.
#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "synthfeed/tinylm.hpp"
#include "synthfeed/toyworld.hpp"
#include "synthfeed/types.hpp"

namespace testutil {

// fresh scratch directory under the system temp root, unique per call
inline std::string scratch_dir(const std::string& tag) {
    static int counter = 0;
    namespace fs = std::filesystem;
    fs::path p = fs::temp_directory_path() /
                 ("synthfeed-test-" + tag + "-" + std::to_string(::getpid()) + "-" +
                  std::to_string(counter++));
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
}

inline size_t line_count(const std::string& path) {
    std::string text = read_file(path);
    size_t n = 0;
    for (char c : text)
        if (c == '\n') ++n;
    return n;
}

inline synthfeed::genbackend::LmDims tiny_dims(int embed = 16, int ffn = 32,
                                               int max_seq = 64) {
    synthfeed::genbackend::LmDims d;
    d.embed = embed;
    d.ffn = ffn;
    d.max_seq = max_seq;
    return d;
}

// model with non-degenerate output distribution (fresh models have an all-zero
// unembedding, which makes every next-token distribution exactly uniform)
inline synthfeed::genbackend::TinyLm perturbed_lm(uint64_t seed,
                                                  synthfeed::genbackend::LmDims dims) {
    synthfeed::genbackend::TinyLm lm(dims, seed);
    synthfeed::util::Rng rng(seed ^ 0xabcdefull);
    for (auto& p : lm.params) p += 0.05 * rng.normal();
    return lm;
}

inline std::vector<synthfeed::core::Query> toy_queries(
    const synthfeed::toyworld::KnowledgeTable& table, int count, uint64_t seed,
    const std::string& prefix = "tq") {
    return synthfeed::toyworld::make_queries(table, count, seed, prefix);
}

struct CmdResult {
    int exit_code = -1;
    std::string out;
    std::string err;
};

// run a shell command capturing stdout/stderr (used by CLI tests via SYNTHFEED_BIN)
inline CmdResult run_cmd(const std::string& cmd, const std::string& dir) {
    std::string out_path = dir + "/cmd.out", err_path = dir + "/cmd.err";
    std::string full = cmd + " >" + out_path + " 2>" + err_path;
    int rc = std::system(full.c_str());
    CmdResult r;
    r.exit_code = (rc == -1) ? -1 : (WIFEXITED(rc) ? WEXITSTATUS(rc) : 128);
    r.out = read_file(out_path);
    r.err = read_file(err_path);
    return r;
}

} // namespace testutil

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <type_traits>
#include <vector>

namespace synthfeed::util {

// ---- deterministic rng -----------------------------------------------------
//
// splitmix64 stream: fully portable, one word of state, good enough statistics
// for desk-scale sampling. std::mt19937_64 would do, but the standard leaves
// real-valued distributions implementation-defined and byte-identical reruns
// are part of the pipeline contract.

inline uint64_t mix64(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

class Rng {
public:
    explicit Rng(uint64_t seed = 0) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0,1), 53-bit resolution
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n)
    uint64_t below(uint64_t n) {
        if (n == 0) throw std::invalid_argument("Rng::below(0)");
        uint64_t threshold = (0 - n) % n;
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    double normal() {
        // Box-Muller, spare discarded so state stays a single word
        double u1 = uniform(), u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // independent stream keyed by (this stream's seed, parts...)
    template <typename... Parts>
    Rng derive(Parts... parts) const {
        uint64_t h = mix64(state_ ^ 0x8f1bbcdc5a5a5a5aull);
        ((h = mix64(h ^ key_of(parts))), ...);
        return Rng(h);
    }

    uint64_t seed() const { return state_; }

private:
    template <typename T>
        requires std::is_integral_v<T>
    static uint64_t key_of(T v) {
        if constexpr (std::is_signed_v<T>)
            return uint64_t(int64_t(v));
        else
            return uint64_t(v);
    }
    static uint64_t key_of(std::string_view s) { return fnv1a64(s); }
    static uint64_t key_of(const std::string& s) { return fnv1a64(s); }
    static uint64_t key_of(const char* s) { return fnv1a64(s); }

    uint64_t state_;
};

// ---- string helpers --------------------------------------------------------

inline std::string to_lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return char(std::tolower(c)); });
    return out;
}

inline std::string trim(std::string_view s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

inline bool contains_ci(std::string_view hay, std::string_view needle) {
    std::string h = to_lower(hay), n = to_lower(needle);
    return h.find(n) != std::string::npos;
}

inline bool starts_with_ci(std::string_view hay, std::string_view needle) {
    if (hay.size() < needle.size()) return false;
    return to_lower(hay.substr(0, needle.size())) == to_lower(needle);
}

inline std::vector<std::string> split_ws(std::string_view s) {
    std::vector<std::string> tokens;
    size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && std::isspace((unsigned char)s[i])) ++i;
        size_t j = i;
        while (j < s.size() && !std::isspace((unsigned char)s[j])) ++j;
        if (j > i) tokens.emplace_back(s.substr(i, j - i));
        i = j;
    }
    return tokens;
}

// ---- small statistics ------------------------------------------------------

inline double mean(const std::vector<double>& xs) {
    if (xs.empty()) throw std::invalid_argument("mean of empty vector");
    double s = 0;
    for (double x : xs) s += x;
    return s / double(xs.size());
}

inline double pop_std(const std::vector<double>& xs) {
    double m = mean(xs), s = 0;
    for (double x : xs) s += (x - m) * (x - m);
    return std::sqrt(s / double(xs.size()));
}

inline double sample_std(const std::vector<double>& xs) {
    if (xs.size() < 2) return 0.0;
    double m = mean(xs), s = 0;
    for (double x : xs) s += (x - m) * (x - m);
    return std::sqrt(s / double(xs.size() - 1));
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// one-sided paired test of H1: mean(diffs) > 0; normal approximation to the
// t statistic, adequate at the n >= 100 scales used here
inline double paired_one_sided_p(const std::vector<double>& diffs) {
    if (diffs.size() < 2) throw std::invalid_argument("paired test needs >= 2 diffs");
    double m = mean(diffs);
    double sd = sample_std(diffs);
    if (sd == 0.0) return m > 0 ? 0.0 : 1.0;
    double t = m / (sd / std::sqrt(double(diffs.size())));
    return 1.0 - normal_cdf(t);
}

// ---- parallel map ----------------------------------------------------------

// fn(i) for i in [0,n); results land at their own index, so output order is
// independent of the thread count
inline void parallel_for(size_t n, int jobs, const std::function<void(size_t)>& fn) {
    if (jobs <= 1 || n <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    size_t nthreads = std::min<size_t>(size_t(jobs), n);
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(nthreads);
    for (size_t t = 0; t < nthreads; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (size_t i = t; i < n; i += nthreads) fn(i);
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

} // namespace synthfeed::util

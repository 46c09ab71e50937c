#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "synthfeed/tinylm.hpp"

namespace synthfeed::genbackend {

// Binary model checkpoints, explicitly little-endian so files move across
// machines:
//   magic "SYF1" | version u32 | arch tag (8 bytes) | kind u32
//   vocab,embed,ffn,max_seq u32 | meta0,meta1 u32
//   backbone count u64 + float32 data | head count u64 + float32 data
// kind 0 = plain LM (head empty); kind 1 = reward model (head = linear scorer,
// meta0 = pooling, meta1 = role); kind 2 = policy+value (head = value head).

namespace ckpt {

constexpr char kMagic[4] = {'S', 'Y', 'F', '1'};
constexpr uint32_t kVersion = 1;

enum class Kind : uint32_t { lm = 0, reward = 1, policy_value = 2 };

struct Blob {
    Kind kind = Kind::lm;
    LmDims dims;
    uint32_t meta0 = 0;
    uint32_t meta1 = 0;
    std::vector<double> backbone;
    std::vector<double> head;
};

namespace detail {

inline void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float f) {
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
}

struct Reader {
    const std::string& buf;
    size_t at = 0;
    std::string path;

    void need(size_t n) const {
        if (at + n > buf.size())
            throw std::runtime_error(path + ": truncated checkpoint");
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t(uint8_t(buf[at + i])) << (8 * i);
        at += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(buf[at + i])) << (8 * i);
        at += 8;
        return v;
    }
    float f32() {
        uint32_t bits = u32();
        float f;
        std::memcpy(&f, &bits, 4);
        return f;
    }
};

inline void put_params(std::string& out, const std::vector<double>& p) {
    put_u64(out, p.size());
    for (double v : p) put_f32(out, float(v));
}

inline std::vector<double> get_params(Reader& r) {
    uint64_t n = r.u64();
    if (n > (1ull << 32)) throw std::runtime_error(r.path + ": absurd parameter count");
    std::vector<double> p(n);
    for (uint64_t i = 0; i < n; ++i) p[i] = double(r.f32());
    return p;
}

} // namespace detail

inline void save(const Blob& b, const std::string& path) {
    std::string out;
    out.append(kMagic, 4);
    detail::put_u32(out, kVersion);
    char tag[8] = {};
    std::strncpy(tag, TinyLm::kArchTag, 8);
    out.append(tag, 8);
    detail::put_u32(out, uint32_t(b.kind));
    detail::put_u32(out, uint32_t(b.dims.vocab));
    detail::put_u32(out, uint32_t(b.dims.embed));
    detail::put_u32(out, uint32_t(b.dims.ffn));
    detail::put_u32(out, uint32_t(b.dims.max_seq));
    detail::put_u32(out, b.meta0);
    detail::put_u32(out, b.meta1);
    detail::put_params(out, b.backbone);
    detail::put_params(out, b.head);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    f.write(out.data(), std::streamsize(out.size()));
    if (!f) throw std::runtime_error("write failed: " + path);
}

inline Blob load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    detail::Reader r{buf, 0, path};
    r.need(4);
    if (std::memcmp(buf.data(), kMagic, 4) != 0)
        throw std::runtime_error(path + ": not a model checkpoint (bad magic)");
    r.at = 4;
    uint32_t version = r.u32();
    if (version != kVersion)
        throw std::runtime_error(path + ": unsupported checkpoint version " +
                                 std::to_string(version));
    r.need(8);
    std::string tag(buf.data() + r.at, 8);
    tag = tag.c_str(); // cut at NUL
    if (tag != TinyLm::kArchTag)
        throw std::runtime_error(path + ": architecture tag mismatch: " + tag);
    r.at += 8;
    Blob b;
    uint32_t kind = r.u32();
    if (kind > 2) throw std::runtime_error(path + ": unknown checkpoint kind");
    b.kind = Kind(kind);
    b.dims.vocab = int(r.u32());
    b.dims.embed = int(r.u32());
    b.dims.ffn = int(r.u32());
    b.dims.max_seq = int(r.u32());
    if (b.dims.vocab != kVocab || b.dims.embed <= 0 || b.dims.ffn <= 0 ||
        b.dims.max_seq <= 0)
        throw std::runtime_error(path + ": invalid model dimensions");
    b.meta0 = r.u32();
    b.meta1 = r.u32();
    b.backbone = detail::get_params(r);
    b.head = detail::get_params(r);
    if (r.at != buf.size())
        throw std::runtime_error(path + ": trailing bytes after checkpoint");
    return b;
}

} // namespace ckpt

inline void save_lm(const TinyLm& lm, const std::string& path) {
    ckpt::Blob b;
    b.kind = ckpt::Kind::lm;
    b.dims = lm.dims;
    b.backbone = lm.params;
    ckpt::save(b, path);
}

inline TinyLm load_lm(const std::string& path) {
    ckpt::Blob b = ckpt::load(path);
    if (b.kind != ckpt::Kind::lm)
        throw std::runtime_error(path + ": not a language-model checkpoint");
    TinyLm lm(b.dims, 0);
    if (b.backbone.size() != lm.param_count())
        throw std::runtime_error(path + ": parameter count does not match dimensions");
    lm.params = std::move(b.backbone);
    return lm;
}

} // namespace synthfeed::genbackend

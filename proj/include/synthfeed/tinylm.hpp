#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "synthfeed/util.hpp"

namespace synthfeed::genbackend {

// byte-level vocabulary: 256 raw bytes plus specials
constexpr int kByteVocab = 256;
constexpr int kBos = 256;
constexpr int kEos = 257;
constexpr int kPad = 258;
constexpr int kVocab = 259;

constexpr double kLnEps = 1e-5;

struct LmDims {
    int vocab = kVocab;
    int embed = 64;
    int ffn = 128;
    int max_seq = 256;

    bool operator==(const LmDims&) const = default;
};

// Single-block causal self-attention LM over byte embeddings:
//   x -> LN -> 1-head attention -> +x -> LN -> silu FFN -> +h -> LN -> logits
// Parameters live in one flat vector so the optimizer and the finite-difference
// checks can treat the model as an opaque coordinate vector.
class TinyLm {
public:
    static constexpr const char* kArchTag = "b1attn";

    struct Layout {
        size_t tok, pos, g1, be1, wq, wk, wv, wo;
        size_t g2, be2, w1, bf1, w2, bf2, gf, bef, unemb, ub;
        size_t total;
    };

    LmDims dims;
    std::vector<double> params;

    TinyLm() : TinyLm(LmDims{}, 0) {}

    explicit TinyLm(LmDims d, uint64_t seed) : dims(d), off_(layout(d)) {
        params.assign(off_.total, 0.0);
        util::Rng rng(util::mix64(seed ^ 0x7c15f39ull));
        const int dm = dims.embed, f = dims.ffn;
        auto fill = [&](size_t at, size_t n, double sd) {
            for (size_t i = 0; i < n; ++i) params[at + i] = sd * rng.normal();
        };
        fill(off_.tok, size_t(dims.vocab) * dm, 0.08);
        fill(off_.pos, size_t(dims.max_seq) * dm, 0.08);
        fill(off_.wq, size_t(dm) * dm, 1.0 / std::sqrt(double(dm)));
        fill(off_.wk, size_t(dm) * dm, 1.0 / std::sqrt(double(dm)));
        fill(off_.wv, size_t(dm) * dm, 1.0 / std::sqrt(double(dm)));
        fill(off_.wo, size_t(dm) * dm, 0.5 / std::sqrt(double(dm)));
        fill(off_.w1, size_t(f) * dm, 1.0 / std::sqrt(double(dm)));
        fill(off_.w2, size_t(dm) * f, 0.5 / std::sqrt(double(f)));
        for (int i = 0; i < dm; ++i) {
            params[off_.g1 + i] = 1.0;
            params[off_.g2 + i] = 1.0;
            params[off_.gf + i] = 1.0;
        }
        // unembedding starts at zero: the untrained model is exactly uniform
    }

    static Layout layout(const LmDims& d) {
        Layout L{};
        size_t at = 0;
        auto take = [&](size_t n) { size_t r = at; at += n; return r; };
        const size_t dm = size_t(d.embed), f = size_t(d.ffn);
        L.tok = take(size_t(d.vocab) * dm);
        L.pos = take(size_t(d.max_seq) * dm);
        L.g1 = take(dm); L.be1 = take(dm);
        L.wq = take(dm * dm); L.wk = take(dm * dm);
        L.wv = take(dm * dm); L.wo = take(dm * dm);
        L.g2 = take(dm); L.be2 = take(dm);
        L.w1 = take(f * dm); L.bf1 = take(f);
        L.w2 = take(dm * f); L.bf2 = take(dm);
        L.gf = take(dm); L.bef = take(dm);
        L.unemb = take(size_t(d.vocab) * dm);
        L.ub = take(size_t(d.vocab));
        L.total = at;
        return L;
    }

    const Layout& off() const { return off_; }
    size_t param_count() const { return off_.total; }

    static std::vector<int> tokens_of(std::string_view text, bool with_bos) {
        std::vector<int> t;
        t.reserve(text.size() + 1);
        if (with_bos) t.push_back(kBos);
        for (unsigned char c : text) t.push_back(int(c));
        return t;
    }

    // ---- forward ------------------------------------------------------------

    struct Cache {
        int T = 0;
        std::vector<int> tokens;
        std::vector<double> x, n1, q, k, v, a, h, n2, u1, sg, z, nf; // T x dim rows
        std::vector<double> mu1, r1, mu2, r2, muf, rf;               // per position
        std::vector<std::vector<double>> att;                        // att[t]: t+1 weights
    };

    Cache forward(const std::vector<int>& tokens) const {
        const int T = int(tokens.size());
        if (T == 0) throw std::invalid_argument("forward on empty token sequence");
        if (T > dims.max_seq)
            throw std::invalid_argument("sequence length " + std::to_string(T) +
                                        " exceeds max_seq " + std::to_string(dims.max_seq));
        const int dm = dims.embed, f = dims.ffn;
        const double isd = 1.0 / std::sqrt(double(dm));
        Cache c;
        c.T = T;
        c.tokens = tokens;
        auto alloc = [&](std::vector<double>& vv, int width) { vv.assign(size_t(T) * width, 0.0); };
        alloc(c.x, dm); alloc(c.n1, dm); alloc(c.q, dm); alloc(c.k, dm); alloc(c.v, dm);
        alloc(c.a, dm); alloc(c.h, dm); alloc(c.n2, dm); alloc(c.u1, f); alloc(c.sg, f);
        alloc(c.z, dm); alloc(c.nf, dm);
        c.mu1.assign(T, 0); c.r1.assign(T, 0); c.mu2.assign(T, 0); c.r2.assign(T, 0);
        c.muf.assign(T, 0); c.rf.assign(T, 0);
        c.att.resize(T);

        const double* P = params.data();
        for (int t = 0; t < T; ++t) {
            int tok = tokens[t];
            if (tok < 0 || tok >= dims.vocab)
                throw std::invalid_argument("token id out of range");
            const double* te = P + off_.tok + size_t(tok) * dm;
            const double* pe = P + off_.pos + size_t(t) * dm;
            double* xt = &c.x[size_t(t) * dm];
            for (int i = 0; i < dm; ++i) xt[i] = te[i] + pe[i];
            layer_norm(xt, P + off_.g1, P + off_.be1, dm,
                       &c.n1[size_t(t) * dm], c.mu1[t], c.r1[t]);
            matvec(P + off_.wq, &c.n1[size_t(t) * dm], &c.q[size_t(t) * dm], dm, dm);
            matvec(P + off_.wk, &c.n1[size_t(t) * dm], &c.k[size_t(t) * dm], dm, dm);
            matvec(P + off_.wv, &c.n1[size_t(t) * dm], &c.v[size_t(t) * dm], dm, dm);

            // causal attention row t
            auto& row = c.att[t];
            row.assign(size_t(t) + 1, 0.0);
            double mx = -1e300;
            for (int u = 0; u <= t; ++u) {
                double s = dot(&c.q[size_t(t) * dm], &c.k[size_t(u) * dm], dm) * isd;
                row[u] = s;
                mx = std::max(mx, s);
            }
            double zsum = 0;
            for (int u = 0; u <= t; ++u) {
                row[u] = std::exp(row[u] - mx);
                zsum += row[u];
            }
            double* at = &c.a[size_t(t) * dm];
            for (int u = 0; u <= t; ++u) {
                row[u] /= zsum;
                const double* vu = &c.v[size_t(u) * dm];
                for (int i = 0; i < dm; ++i) at[i] += row[u] * vu[i];
            }

            double* ht = &c.h[size_t(t) * dm];
            std::vector<double> ot(dm);
            matvec(P + off_.wo, at, ot.data(), dm, dm);
            for (int i = 0; i < dm; ++i) ht[i] = xt[i] + ot[i];

            layer_norm(ht, P + off_.g2, P + off_.be2, dm,
                       &c.n2[size_t(t) * dm], c.mu2[t], c.r2[t]);
            double* u1t = &c.u1[size_t(t) * f];
            matvec(P + off_.w1, &c.n2[size_t(t) * dm], u1t, f, dm);
            for (int i = 0; i < f; ++i) u1t[i] += P[off_.bf1 + i];
            double* sgt = &c.sg[size_t(t) * f];
            for (int i = 0; i < f; ++i) sgt[i] = u1t[i] * sigmoid(u1t[i]);
            std::vector<double> mt(dm);
            matvec(P + off_.w2, sgt, mt.data(), dm, f);
            double* zt = &c.z[size_t(t) * dm];
            for (int i = 0; i < dm; ++i) zt[i] = ht[i] + mt[i] + P[off_.bf2 + i];
            layer_norm(zt, P + off_.gf, P + off_.bef, dm,
                       &c.nf[size_t(t) * dm], c.muf[t], c.rf[t]);
        }
        return c;
    }

    std::vector<double> logits_at(const Cache& c, int t) const {
        const int dm = dims.embed;
        std::vector<double> lg(dims.vocab);
        const double* P = params.data();
        const double* nft = &c.nf[size_t(t) * dm];
        for (int w = 0; w < dims.vocab; ++w)
            lg[w] = dot(P + off_.unemb + size_t(w) * dm, nft, dm) + P[off_.ub + w];
        return lg;
    }

    static std::vector<double> softmax(const std::vector<double>& logits) {
        double mx = -1e300;
        for (double x : logits) mx = std::max(mx, x);
        std::vector<double> p(logits.size());
        double z = 0;
        for (size_t i = 0; i < logits.size(); ++i) {
            p[i] = std::exp(logits[i] - mx);
            z += p[i];
        }
        for (double& x : p) x /= z;
        return p;
    }

    // ---- backward -----------------------------------------------------------

    // dlogits[t] may be empty (no loss at t); dnf_extra, when nonempty, is a
    // T x embed row-major gradient injected at the final-norm output (reward
    // and value heads hook in there)
    void backward(const Cache& c, const std::vector<std::vector<double>>& dlogits,
                  const std::vector<double>& dnf_extra, std::vector<double>& grad) const {
        const int T = c.T, dm = dims.embed, f = dims.ffn;
        const double isd = 1.0 / std::sqrt(double(dm));
        if (grad.size() != params.size()) grad.assign(params.size(), 0.0);
        const double* P = params.data();
        double* G = grad.data();

        std::vector<double> dnf(size_t(T) * dm, 0.0);
        if (!dnf_extra.empty()) {
            if (dnf_extra.size() != size_t(T) * dm)
                throw std::invalid_argument("dnf_extra has wrong shape");
            dnf = dnf_extra;
        }
        for (int t = 0; t < T; ++t) {
            if (t >= int(dlogits.size()) || dlogits[t].empty()) continue;
            const auto& dl = dlogits[t];
            const double* nft = &c.nf[size_t(t) * dm];
            double* dnft = &dnf[size_t(t) * dm];
            for (int w = 0; w < dims.vocab; ++w) {
                double g = dl[w];
                if (g == 0.0) continue;
                double* urow = G + off_.unemb + size_t(w) * dm;
                const double* prow = P + off_.unemb + size_t(w) * dm;
                for (int i = 0; i < dm; ++i) {
                    urow[i] += g * nft[i];
                    dnft[i] += g * prow[i];
                }
                G[off_.ub + w] += g;
            }
        }

        std::vector<double> dx(size_t(T) * dm, 0.0), dh(size_t(T) * dm, 0.0);
        std::vector<double> dq(size_t(T) * dm, 0.0), dk(size_t(T) * dm, 0.0),
            dv(size_t(T) * dm, 0.0), dn1(size_t(T) * dm, 0.0);

        std::vector<double> dz(dm), dm_vec(dm), dsg(f), du1(f), dn2(dm), da(dm), dot_(dm);
        for (int t = T - 1; t >= 0; --t) {
            // final LN
            ln_backward(&dnf[size_t(t) * dm], &c.z[size_t(t) * dm], c.muf[t], c.rf[t],
                        P + off_.gf, dm, G + off_.gf, G + off_.bef, dz.data());
            double* dht = &dh[size_t(t) * dm];
            for (int i = 0; i < dm; ++i) {
                dht[i] += dz[i];
                dm_vec[i] = dz[i];
                G[off_.bf2 + i] += dz[i];
            }
            // FFN
            const double* sgt = &c.sg[size_t(t) * f];
            for (int i = 0; i < f; ++i) dsg[i] = 0.0;
            for (int i = 0; i < dm; ++i) {
                const double* w2row = P + off_.w2 + size_t(i) * f;
                double* gw2row = G + off_.w2 + size_t(i) * f;
                double g = dm_vec[i];
                for (int j = 0; j < f; ++j) {
                    gw2row[j] += g * sgt[j];
                    dsg[j] += g * w2row[j];
                }
            }
            const double* u1t = &c.u1[size_t(t) * f];
            for (int j = 0; j < f; ++j) {
                double s = sigmoid(u1t[j]);
                du1[j] = dsg[j] * s * (1.0 + u1t[j] * (1.0 - s));
                G[off_.bf1 + j] += du1[j];
            }
            const double* n2t = &c.n2[size_t(t) * dm];
            for (int i = 0; i < dm; ++i) dn2[i] = 0.0;
            for (int j = 0; j < f; ++j) {
                const double* w1row = P + off_.w1 + size_t(j) * dm;
                double* gw1row = G + off_.w1 + size_t(j) * dm;
                double g = du1[j];
                for (int i = 0; i < dm; ++i) {
                    gw1row[i] += g * n2t[i];
                    dn2[i] += g * w1row[i];
                }
            }
            // pre-FFN LN
            std::vector<double> dh_ln(dm);
            ln_backward(dn2.data(), &c.h[size_t(t) * dm], c.mu2[t], c.r2[t],
                        P + off_.g2, dm, G + off_.g2, G + off_.be2, dh_ln.data());
            for (int i = 0; i < dm; ++i) dht[i] += dh_ln[i];

            // attention output projection
            double* dxt = &dx[size_t(t) * dm];
            for (int i = 0; i < dm; ++i) {
                dxt[i] += dht[i];
                dot_[i] = dht[i];
            }
            const double* at = &c.a[size_t(t) * dm];
            for (int i = 0; i < dm; ++i) da[i] = 0.0;
            for (int i = 0; i < dm; ++i) {
                const double* worow = P + off_.wo + size_t(i) * dm;
                double* gworow = G + off_.wo + size_t(i) * dm;
                double g = dot_[i];
                for (int j = 0; j < dm; ++j) {
                    gworow[j] += g * at[j];
                    da[j] += g * worow[j];
                }
            }
            // softmax attention row
            const auto& row = c.att[t];
            std::vector<double> datt(t + 1), ds(t + 1);
            double inner = 0;
            for (int u = 0; u <= t; ++u) {
                const double* vu = &c.v[size_t(u) * dm];
                datt[u] = dot(da.data(), vu, dm);
                double* dvu = &dv[size_t(u) * dm];
                for (int i = 0; i < dm; ++i) dvu[i] += row[u] * da[i];
                inner += row[u] * datt[u];
            }
            const double* qt = &c.q[size_t(t) * dm];
            double* dqt = &dq[size_t(t) * dm];
            for (int u = 0; u <= t; ++u) {
                ds[u] = row[u] * (datt[u] - inner);
                const double* ku = &c.k[size_t(u) * dm];
                double* dku = &dk[size_t(u) * dm];
                double g = ds[u] * isd;
                for (int i = 0; i < dm; ++i) {
                    dqt[i] += g * ku[i];
                    dku[i] += g * qt[i];
                }
            }
        }

        // project q/k/v gradients back to the first LN and embeddings
        for (int t = 0; t < T; ++t) {
            const double* n1t = &c.n1[size_t(t) * dm];
            double* dn1t = &dn1[size_t(t) * dm];
            accum_linear(P + off_.wq, G + off_.wq, &dq[size_t(t) * dm], n1t, dn1t, dm, dm);
            accum_linear(P + off_.wk, G + off_.wk, &dk[size_t(t) * dm], n1t, dn1t, dm, dm);
            accum_linear(P + off_.wv, G + off_.wv, &dv[size_t(t) * dm], n1t, dn1t, dm, dm);
            std::vector<double> dx_ln(dm);
            ln_backward(dn1t, &c.x[size_t(t) * dm], c.mu1[t], c.r1[t],
                        P + off_.g1, dm, G + off_.g1, G + off_.be1, dx_ln.data());
            double* dxt = &dx[size_t(t) * dm];
            for (int i = 0; i < dm; ++i) dxt[i] += dx_ln[i];
            double* gte = G + off_.tok + size_t(c.tokens[t]) * dm;
            double* gpe = G + off_.pos + size_t(t) * dm;
            for (int i = 0; i < dm; ++i) {
                gte[i] += dxt[i];
                gpe[i] += dxt[i];
            }
        }
    }

    // ---- language-model loss --------------------------------------------------

    // mean cross-entropy over positions t where loss_mask[t+1] is true (the mask
    // indexes target tokens); grad, when non-null, receives d(mean CE)/d(params)
    double lm_loss(const std::vector<int>& tokens, const std::vector<char>& loss_mask,
                   std::vector<double>* grad) const {
        const int T = int(tokens.size());
        if (T < 2) throw std::invalid_argument("lm_loss needs at least 2 tokens");
        if (loss_mask.size() != tokens.size())
            throw std::invalid_argument("loss mask size mismatch");
        Cache c = forward(tokens);
        int counted = 0;
        for (int t = 0; t + 1 < T; ++t)
            if (loss_mask[t + 1]) ++counted;
        if (counted == 0) throw std::invalid_argument("loss mask selects no positions");

        double loss = 0.0;
        std::vector<std::vector<double>> dlogits(grad ? T : 0);
        for (int t = 0; t + 1 < T; ++t) {
            if (!loss_mask[t + 1]) continue;
            std::vector<double> lg = logits_at(c, t);
            std::vector<double> p = softmax(lg);
            int target = tokens[t + 1];
            loss += -std::log(std::max(p[target], 1e-300));
            if (grad) {
                auto& dl = dlogits[t];
                dl.resize(dims.vocab);
                double w = 1.0 / double(counted);
                for (int i = 0; i < dims.vocab; ++i) dl[i] = p[i] * w;
                dl[target] -= w;
            }
        }
        loss /= double(counted);
        if (grad) backward(c, dlogits, {}, *grad);
        return loss;
    }

    // sum of per-token log-probabilities of continuation given prompt
    double log_prob(std::string_view prompt, std::string_view continuation) const {
        if (continuation.empty())
            throw std::invalid_argument("log_prob of empty continuation");
        std::vector<int> toks = tokens_of(prompt, true);
        const size_t prompt_len = toks.size();
        for (unsigned char ch : continuation) toks.push_back(int(ch));
        if (int(toks.size()) > dims.max_seq) {
            // keep the continuation and the most recent prompt bytes
            size_t excess = toks.size() - size_t(dims.max_seq);
            if (excess >= prompt_len)
                throw std::invalid_argument("continuation alone exceeds max_seq");
            toks.erase(toks.begin(), toks.begin() + excess);
        }
        Cache c = forward(toks);
        size_t cont_start = toks.size() - continuation.size();
        double lp = 0.0;
        for (size_t t = cont_start; t < toks.size(); ++t) {
            std::vector<double> p = softmax(logits_at(c, int(t - 1)));
            lp += std::log(std::max(p[toks[t]], 1e-300));
        }
        return lp;
    }

    // ---- incremental decoding -------------------------------------------------

    // per-sequence key/value cache for sampling; push() advances one token and
    // returns the logits for the next position
    struct DecodeState {
        std::vector<double> k, v; // t x embed
        int T = 0;
    };

    std::vector<double> decode_step(DecodeState& st, int token) const {
        const int dm = dims.embed, f = dims.ffn;
        const double isd = 1.0 / std::sqrt(double(dm));
        if (st.T >= dims.max_seq)
            throw std::invalid_argument("decode past max_seq");
        const double* P = params.data();
        const int t = st.T;
        std::vector<double> x(dm), n1(dm), q(dm), kt(dm), vt(dm), a(dm, 0.0), h(dm),
            n2(dm), u1(f), sg(f), z(dm), nf(dm);
        const double* te = P + off_.tok + size_t(token) * dm;
        const double* pe = P + off_.pos + size_t(t) * dm;
        for (int i = 0; i < dm; ++i) x[i] = te[i] + pe[i];
        double mu, r;
        layer_norm(x.data(), P + off_.g1, P + off_.be1, dm, n1.data(), mu, r);
        matvec(P + off_.wq, n1.data(), q.data(), dm, dm);
        matvec(P + off_.wk, n1.data(), kt.data(), dm, dm);
        matvec(P + off_.wv, n1.data(), vt.data(), dm, dm);
        st.k.insert(st.k.end(), kt.begin(), kt.end());
        st.v.insert(st.v.end(), vt.begin(), vt.end());
        st.T += 1;

        std::vector<double> att(t + 1);
        double mx = -1e300;
        for (int u = 0; u <= t; ++u) {
            att[u] = dot(q.data(), &st.k[size_t(u) * dm], dm) * isd;
            mx = std::max(mx, att[u]);
        }
        double zsum = 0;
        for (int u = 0; u <= t; ++u) {
            att[u] = std::exp(att[u] - mx);
            zsum += att[u];
        }
        for (int u = 0; u <= t; ++u) {
            att[u] /= zsum;
            const double* vu = &st.v[size_t(u) * dm];
            for (int i = 0; i < dm; ++i) a[i] += att[u] * vu[i];
        }
        std::vector<double> o(dm);
        matvec(P + off_.wo, a.data(), o.data(), dm, dm);
        for (int i = 0; i < dm; ++i) h[i] = x[i] + o[i];
        layer_norm(h.data(), P + off_.g2, P + off_.be2, dm, n2.data(), mu, r);
        matvec(P + off_.w1, n2.data(), u1.data(), f, dm);
        for (int i = 0; i < f; ++i) u1[i] += P[off_.bf1 + i];
        for (int i = 0; i < f; ++i) sg[i] = u1[i] * sigmoid(u1[i]);
        std::vector<double> m(dm);
        matvec(P + off_.w2, sg.data(), m.data(), dm, f);
        for (int i = 0; i < dm; ++i) z[i] = h[i] + m[i] + P[off_.bf2 + i];
        layer_norm(z.data(), P + off_.gf, P + off_.bef, dm, nf.data(), mu, r);
        std::vector<double> lg(dims.vocab);
        for (int w = 0; w < dims.vocab; ++w)
            lg[w] = dot(P + off_.unemb + size_t(w) * dm, nf.data(), dm) + P[off_.ub + w];
        return lg;
    }

private:
    Layout off_;

    static double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

    static double dot(const double* a, const double* b, int n) {
        double s = 0;
        for (int i = 0; i < n; ++i) s += a[i] * b[i];
        return s;
    }

    // out = W * in, W row-major (rows x cols)
    static void matvec(const double* W, const double* in, double* out, int rows, int cols) {
        for (int r = 0; r < rows; ++r) out[r] = dot(W + size_t(r) * cols, in, cols);
    }

    // dW += dout (x) in; din += W^T dout
    static void accum_linear(const double* W, double* dW, const double* dout,
                             const double* in, double* din, int rows, int cols) {
        for (int r = 0; r < rows; ++r) {
            double g = dout[r];
            if (g == 0.0) continue;
            const double* wrow = W + size_t(r) * cols;
            double* dwrow = dW + size_t(r) * cols;
            for (int ccol = 0; ccol < cols; ++ccol) {
                dwrow[ccol] += g * in[ccol];
                din[ccol] += g * wrow[ccol];
            }
        }
    }

    static void layer_norm(const double* x, const double* g, const double* b, int n,
                           double* out, double& mu, double& rstd) {
        double m = 0;
        for (int i = 0; i < n; ++i) m += x[i];
        m /= n;
        double var = 0;
        for (int i = 0; i < n; ++i) var += (x[i] - m) * (x[i] - m);
        var /= n;
        double r = 1.0 / std::sqrt(var + kLnEps);
        for (int i = 0; i < n; ++i) out[i] = g[i] * (x[i] - m) * r + b[i];
        mu = m;
        rstd = r;
    }

    static void ln_backward(const double* dy, const double* x, double mu, double rstd,
                            const double* g, int n, double* dgamma, double* dbeta,
                            double* dx) {
        double c1 = 0, c2 = 0;
        for (int i = 0; i < n; ++i) {
            double xhat = (x[i] - mu) * rstd;
            double dxhat = dy[i] * g[i];
            dgamma[i] += dy[i] * xhat;
            dbeta[i] += dy[i];
            c1 += dxhat;
            c2 += dxhat * xhat;
        }
        c1 /= n;
        c2 /= n;
        for (int i = 0; i < n; ++i) {
            double xhat = (x[i] - mu) * rstd;
            double dxhat = dy[i] * g[i];
            dx[i] = rstd * (dxhat - c1 - xhat * c2);
        }
    }
};

// ---- Adam --------------------------------------------------------------------

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.0; // decoupled
};

class Adam {
public:
    explicit Adam(size_t n, AdamConfig cfg = {}) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

    void step(std::vector<double>& params, const std::vector<double>& grad,
              double lr_override = -1.0) {
        if (params.size() != m_.size() || grad.size() != m_.size())
            throw std::invalid_argument("Adam size mismatch");
        ++t_;
        const double lr = lr_override >= 0 ? lr_override : cfg_.lr;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (size_t i = 0; i < params.size(); ++i) {
            m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
            v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
            double mhat = m_[i] / bc1;
            double vhat = v_[i] / bc2;
            if (cfg_.weight_decay > 0) params[i] -= lr * cfg_.weight_decay * params[i];
            params[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }

    int64_t steps() const { return t_; }

private:
    AdamConfig cfg_;
    std::vector<double> m_, v_;
    int64_t t_ = 0;
};

// ---- pre-training -------------------------------------------------------------

struct LmTrainLog {
    std::vector<double> epoch_train_loss;
    std::vector<double> epoch_heldout_loss;
    double initial_heldout = 0.0;
    double final_heldout = 0.0;
    int64_t steps = 0;
};

struct LmTrainConfig {
    int epochs = 2;
    double lr = 3e-3;
    int batch = 16;
    uint64_t seed = 0;
};

// next-byte training over a string corpus; a ~10% split is held out unless the
// corpus is a single document, in which case held-out == corpus (memorization)
inline LmTrainLog train_lm(TinyLm& lm, const std::vector<std::string>& corpus,
                           const LmTrainConfig& cfg) {
    if (corpus.empty()) throw std::invalid_argument("train_lm: empty corpus");
    std::vector<std::vector<int>> seqs;
    for (const auto& s : corpus) {
        if (s.empty()) continue;
        std::vector<int> t = TinyLm::tokens_of(s, true);
        t.push_back(kEos);
        if (int(t.size()) > lm.dims.max_seq) t.resize(lm.dims.max_seq);
        if (t.size() >= 2) seqs.push_back(std::move(t));
    }
    if (seqs.empty()) throw std::invalid_argument("train_lm: no usable documents");

    std::vector<size_t> train_idx, held_idx;
    if (seqs.size() == 1) {
        train_idx = {0};
        held_idx = {0};
    } else {
        for (size_t i = 0; i < seqs.size(); ++i)
            (i % 10 == 9 ? held_idx : train_idx).push_back(i);
        if (held_idx.empty()) held_idx.push_back(seqs.size() - 1);
    }

    auto heldout_loss = [&]() {
        double total = 0.0;
        size_t count = 0;
        for (size_t i : held_idx) {
            std::vector<char> mask(seqs[i].size(), 1);
            total += lm.lm_loss(seqs[i], mask, nullptr) * double(seqs[i].size() - 1);
            count += seqs[i].size() - 1;
        }
        return total / double(count);
    };

    LmTrainLog log;
    log.initial_heldout = heldout_loss();
    Adam opt(lm.param_count(), AdamConfig{cfg.lr, 0.9, 0.95, 1e-8, 0.0});
    util::Rng rng(util::mix64(cfg.seed ^ 0x1a2b3cull));
    double last_finite = log.initial_heldout;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<size_t> order = train_idx;
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.below(i)]);
        double epoch_loss = 0.0;
        size_t nbatches = 0;
        for (size_t b = 0; b < order.size(); b += size_t(cfg.batch)) {
            size_t e = std::min(order.size(), b + size_t(cfg.batch));
            std::vector<double> grad(lm.param_count(), 0.0), one;
            double batch_loss = 0.0;
            for (size_t i = b; i < e; ++i) {
                const auto& seq = seqs[order[i]];
                std::vector<char> mask(seq.size(), 1);
                one.assign(lm.param_count(), 0.0);
                batch_loss += lm.lm_loss(seq, mask, &one);
                for (size_t p = 0; p < grad.size(); ++p) grad[p] += one[p];
            }
            double scale = 1.0 / double(e - b);
            batch_loss *= scale;
            if (!std::isfinite(batch_loss))
                throw std::runtime_error("train_lm diverged; last finite loss " +
                                         std::to_string(last_finite));
            last_finite = batch_loss;
            for (double& g : grad) g *= scale;
            opt.step(lm.params, grad);
            epoch_loss += batch_loss;
            ++nbatches;
            ++log.steps;
        }
        log.epoch_train_loss.push_back(nbatches ? epoch_loss / double(nbatches) : 0.0);
        log.epoch_heldout_loss.push_back(heldout_loss());
    }
    log.final_heldout = cfg.epochs > 0 ? log.epoch_heldout_loss.back() : log.initial_heldout;
    return log;
}

} // namespace synthfeed::genbackend

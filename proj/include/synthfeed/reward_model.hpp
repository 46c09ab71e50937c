#pragma once

#include <atomic>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "synthfeed/checkpoint.hpp"
#include "synthfeed/jsonl.hpp"
#include "synthfeed/tinylm.hpp"
#include "synthfeed/types.hpp"
#include "synthfeed/util.hpp"

namespace synthfeed::rm {

enum class Pooling : uint32_t { last_token = 0, mean = 1 };
enum class Role : uint32_t { main = 0, asis = 1 };

inline const char* pooling_name(Pooling p) { return p == Pooling::mean ? "mean" : "last_token"; }
inline Pooling pooling_from(const std::string& s) {
    if (s == "last_token") return Pooling::last_token;
    if (s == "mean") return Pooling::mean;
    throw std::invalid_argument("unknown pooling: " + s);
}

inline std::string render_pair(const std::string& x, const std::string& y) {
    return "Human: " + x + "\n\nAssistant: " + y;
}

// Scalar scorer r(x, y): shared-architecture backbone plus a linear head over
// pooled final states. Mean pooling is the default: with a single attention
// block, the last position's state alone is a poor summary of query/response
// agreement, and the averaged state separates the toy data far better.
class RewardModel {
public:
    genbackend::TinyLm backbone;
    std::vector<double> head; // embed weights + bias
    Pooling pooling = Pooling::mean;
    Role role = Role::main;

    RewardModel() : RewardModel(genbackend::TinyLm(), Pooling::mean) {}

    explicit RewardModel(genbackend::TinyLm bb, Pooling pool = Pooling::mean,
                         Role r = Role::main)
        : backbone(std::move(bb)), head(size_t(backbone.dims.embed) + 1, 0.0),
          pooling(pool), role(r) {}

    RewardModel(const RewardModel& o)
        : backbone(o.backbone), head(o.head), pooling(o.pooling), role(o.role),
          truncations_(o.truncations_.load()) {}
    RewardModel& operator=(const RewardModel& o) {
        backbone = o.backbone;
        head = o.head;
        pooling = o.pooling;
        role = o.role;
        truncations_.store(o.truncations_.load());
        return *this;
    }

    int max_seq() const { return backbone.dims.max_seq; }
    int64_t truncations() const { return truncations_.load(); }

    // response truncated from the right when the rendered pair overflows
    std::vector<int> tokenize(const std::string& x, const std::string& y) const {
        std::vector<int> toks = genbackend::TinyLm::tokens_of(render_pair(x, y), true);
        if (int(toks.size()) > max_seq()) {
            toks.resize(size_t(max_seq()));
            truncations_.fetch_add(1);
        }
        return toks;
    }

    double score(const std::string& x, const std::string& y) const {
        return score_tokens(tokenize(x, y));
    }

    // score an already-rendered context (multi-turn); overflow drops the oldest
    // bytes so the candidate response always stays in view
    double score_context(const std::string& rendered) const {
        std::vector<int> toks = genbackend::TinyLm::tokens_of(rendered, true);
        if (int(toks.size()) > max_seq()) {
            toks.erase(toks.begin() + 1,
                       toks.begin() + 1 + (ptrdiff_t(toks.size()) - max_seq()));
            truncations_.fetch_add(1);
        }
        return score_tokens(toks);
    }

    double score_tokens(const std::vector<int>& toks) const {
        genbackend::TinyLm::Cache c = backbone.forward(toks);
        std::vector<double> pooled = pool(c);
        const int dm = backbone.dims.embed;
        double s = head[size_t(dm)];
        for (int i = 0; i < dm; ++i) s += head[size_t(i)] * pooled[size_t(i)];
        return s;
    }

    std::vector<double> pool(const genbackend::TinyLm::Cache& c) const {
        const int dm = backbone.dims.embed;
        std::vector<double> out(size_t(dm), 0.0);
        if (pooling == Pooling::last_token) {
            for (int i = 0; i < dm; ++i) out[size_t(i)] = c.nf[size_t(c.T - 1) * dm + i];
        } else {
            for (int t = 0; t < c.T; ++t)
                for (int i = 0; i < dm; ++i) out[size_t(i)] += c.nf[size_t(t) * dm + i];
            for (int i = 0; i < dm; ++i) out[size_t(i)] /= double(c.T);
        }
        return out;
    }

    // flat view: backbone parameters then head
    size_t param_count() const { return backbone.param_count() + head.size(); }
    std::vector<double> flat_params() const {
        std::vector<double> p = backbone.params;
        p.insert(p.end(), head.begin(), head.end());
        return p;
    }
    void set_flat_params(const std::vector<double>& p) {
        if (p.size() != param_count())
            throw std::invalid_argument("parameter vector size mismatch");
        std::copy(p.begin(), p.begin() + ptrdiff_t(backbone.param_count()),
                  backbone.params.begin());
        std::copy(p.begin() + ptrdiff_t(backbone.param_count()), p.end(), head.begin());
    }

private:
    mutable std::atomic<int64_t> truncations_{0};
};

// ---- training objective --------------------------------------------------------

inline double stable_softplus(double x) {
    // log(1 + e^x)
    return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// mean over pairs of -log sigma(score(chosen) - score(rejected)); gradient is
// laid out like flat_params()
inline double preference_loss(const RewardModel& model,
                              const std::vector<core::ComparisonPair>& batch,
                              std::vector<double>* grad) {
    if (batch.empty()) throw std::invalid_argument("preference_loss on empty batch");
    const size_t nb = model.backbone.param_count();
    const int dm = model.backbone.dims.embed;
    if (grad) grad->assign(model.param_count(), 0.0);

    double total = 0.0;
    const double scale = 1.0 / double(batch.size());
    std::vector<double> bb_grad;
    for (size_t pi = 0; pi < batch.size(); ++pi) {
        const auto& pair = batch[pi];
        std::vector<int> tc = model.tokenize(pair.query.text, pair.chosen);
        std::vector<int> tr = model.tokenize(pair.query.text, pair.rejected);
        genbackend::TinyLm::Cache cc = model.backbone.forward(tc);
        genbackend::TinyLm::Cache cr = model.backbone.forward(tr);
        std::vector<double> pc = model.pool(cc), pr = model.pool(cr);
        double sc = model.head[size_t(dm)], sr = model.head[size_t(dm)];
        for (int i = 0; i < dm; ++i) {
            sc += model.head[size_t(i)] * pc[size_t(i)];
            sr += model.head[size_t(i)] * pr[size_t(i)];
        }
        double diff = sc - sr;
        double loss = stable_softplus(-diff);
        if (!std::isfinite(loss))
            throw std::runtime_error("non-finite preference loss at pair index " +
                                     std::to_string(pi));
        total += loss;
        if (!grad) continue;

        // d loss / d diff = sigma(diff) - 1
        double ddiff = -1.0 / (1.0 + std::exp(diff)); // -(1 - sigma(diff))
        double dsc = ddiff * scale, dsr = -ddiff * scale;
        double* ghead = grad->data() + nb;
        for (const auto& [cache, pooled, ds] :
             {std::tuple(&cc, &pc, dsc), std::tuple(&cr, &pr, dsr)}) {
            for (int i = 0; i < dm; ++i) ghead[i] += ds * (*pooled)[size_t(i)];
            ghead[dm] += ds;
            std::vector<double> dnf(size_t(cache->T) * dm, 0.0);
            if (model.pooling == Pooling::last_token) {
                for (int i = 0; i < dm; ++i)
                    dnf[size_t(cache->T - 1) * dm + i] = ds * model.head[size_t(i)];
            } else {
                double w = ds / double(cache->T);
                for (int t = 0; t < cache->T; ++t)
                    for (int i = 0; i < dm; ++i)
                        dnf[size_t(t) * dm + i] = w * model.head[size_t(i)];
            }
            bb_grad.assign(nb, 0.0);
            model.backbone.backward(*cache, {}, dnf, bb_grad);
            for (size_t i = 0; i < nb; ++i) (*grad)[i] += bb_grad[i];
        }
    }
    return total * scale;
}

inline double pairwise_accuracy(const RewardModel& model,
                                const std::vector<core::ComparisonPair>& pairs,
                                int jobs = 1) {
    if (pairs.empty()) throw std::invalid_argument("pairwise_accuracy on empty set");
    std::vector<char> correct(pairs.size(), 0);
    util::parallel_for(pairs.size(), jobs, [&](size_t i) {
        double sc = model.score(pairs[i].query.text, pairs[i].chosen);
        double sr = model.score(pairs[i].query.text, pairs[i].rejected);
        correct[i] = sc > sr ? 1 : 0; // ties count as incorrect
    });
    size_t hits = 0;
    for (char c : correct) hits += size_t(c);
    return double(hits) / double(pairs.size());
}

// ---- training loop ---------------------------------------------------------------

struct RmTrainConfig {
    int epochs = 1;
    double lr = 1e-3; // desk-scale width-adjusted value
    int batch = 16;
    int max_seq = 256;
    uint64_t seed = 0;
    int jobs = 1;

    void validate() const {
        if (epochs < 0 || lr < 0 || batch < 1 || max_seq < 1)
            throw std::invalid_argument("invalid reward-model training config");
    }
};

// full-scale reference operating point
inline RmTrainConfig reference_rm_train_config() {
    RmTrainConfig c;
    c.epochs = 1;
    c.lr = 1e-5;
    c.batch = 64;
    c.max_seq = 1024;
    return c;
}

struct RmTrainLog {
    std::vector<double> step_loss;
    std::vector<double> epoch_valid_accuracy;
    double final_valid_accuracy = 0.0;
};

inline RmTrainLog train_rm(RewardModel& model, std::vector<core::ComparisonPair> train,
                           const std::vector<core::ComparisonPair>& valid,
                           const RmTrainConfig& cfg) {
    cfg.validate();
    if (train.empty()) throw std::invalid_argument("train_rm: empty training set");
    RmTrainLog log;
    genbackend::Adam opt(model.param_count(),
                         genbackend::AdamConfig{cfg.lr, 0.9, 0.95, 1e-8, 0.0});
    util::Rng rng(util::mix64(cfg.seed ^ 0x52e77ull));
    std::vector<double> grad;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (size_t i = train.size(); i > 1; --i)
            std::swap(train[i - 1], train[rng.below(i)]);
        for (size_t b = 0; b < train.size(); b += size_t(cfg.batch)) {
            size_t e = std::min(train.size(), b + size_t(cfg.batch));
            std::vector<core::ComparisonPair> batch(train.begin() + ptrdiff_t(b),
                                                    train.begin() + ptrdiff_t(e));
            double loss = preference_loss(model, batch, &grad);
            if (!std::isfinite(loss))
                throw std::runtime_error("train_rm diverged at step " +
                                         std::to_string(log.step_loss.size()));
            std::vector<double> params = model.flat_params();
            opt.step(params, grad);
            model.set_flat_params(params);
            log.step_loss.push_back(loss);
        }
        if (!valid.empty())
            log.epoch_valid_accuracy.push_back(pairwise_accuracy(model, valid, cfg.jobs));
    }
    log.final_valid_accuracy =
        log.epoch_valid_accuracy.empty()
            ? (valid.empty() ? 0.0 : pairwise_accuracy(model, valid, cfg.jobs))
            : log.epoch_valid_accuracy.back();
    return log;
}

// As-is variant: same training contract, different provenance tag. The source
// is out-of-pipeline comparison data (community QA stand-in).
inline RewardModel train_asis_rm(const std::vector<core::ComparisonPair>& pairs,
                                 genbackend::TinyLm backbone, const RmTrainConfig& cfg,
                                 RmTrainLog* log_out = nullptr) {
    if (pairs.empty()) throw std::invalid_argument("train_asis_rm: no comparison pairs");
    RewardModel model(std::move(backbone), Pooling::mean, Role::asis);
    size_t n_valid = std::max<size_t>(1, pairs.size() / 10);
    std::vector<core::ComparisonPair> valid(pairs.end() - ptrdiff_t(n_valid), pairs.end());
    std::vector<core::ComparisonPair> train(pairs.begin(), pairs.end() - ptrdiff_t(n_valid));
    if (train.empty()) train = valid;
    RmTrainLog log = train_rm(model, train, valid, cfg);
    if (log_out) *log_out = log;
    return model;
}

// ---- checkpoints -----------------------------------------------------------------

inline void save_rm(const RewardModel& model, const std::string& path) {
    genbackend::ckpt::Blob b;
    b.kind = genbackend::ckpt::Kind::reward;
    b.dims = model.backbone.dims;
    b.meta0 = uint32_t(model.pooling);
    b.meta1 = uint32_t(model.role);
    b.backbone = model.backbone.params;
    b.head = model.head;
    genbackend::ckpt::save(b, path);
}

inline RewardModel load_rm(const std::string& path) {
    genbackend::ckpt::Blob b = genbackend::ckpt::load(path);
    if (b.kind != genbackend::ckpt::Kind::reward)
        throw std::runtime_error(path + ": not a reward-model checkpoint");
    genbackend::TinyLm bb(b.dims, 0);
    if (b.backbone.size() != bb.param_count())
        throw std::runtime_error(path + ": parameter count does not match dimensions");
    bb.params = std::move(b.backbone);
    RewardModel model(std::move(bb), Pooling(b.meta0), Role(b.meta1));
    if (b.head.size() != model.head.size())
        throw std::runtime_error(path + ": head size does not match dimensions");
    model.head = std::move(b.head);
    return model;
}

// ---- external comparison formats ---------------------------------------------------

// Converts records of the common chosen/rejected transcript form
//   {"chosen": "\n\nHuman: ...\n\nAssistant: ...", "rejected": "..."}
// into the comparisons.jsonl schema (first human turn becomes the query, last
// assistant turn of each transcript the response).
inline core::ComparisonPair convert_transcript_record(const nlohmann::json& j,
                                                      size_t index) {
    auto extract = [&](const std::string& text, std::string& query, std::string& reply) {
        size_t h = text.find("Human:");
        if (h == std::string::npos)
            throw std::runtime_error("record " + std::to_string(index) +
                                     ": no \"Human:\" turn");
        size_t a = text.find("Assistant:", h);
        if (a == std::string::npos)
            throw std::runtime_error("record " + std::to_string(index) +
                                     ": no \"Assistant:\" turn");
        query = util::trim(text.substr(h + 6, a - h - 6));
        size_t last_a = text.rfind("Assistant:");
        reply = util::trim(text.substr(last_a + 10));
        if (query.empty() || reply.empty())
            throw std::runtime_error("record " + std::to_string(index) +
                                     ": empty query or reply");
    };
    std::string cq, cr, rq, rr;
    extract(j.at("chosen").get<std::string>(), cq, cr);
    extract(j.at("rejected").get<std::string>(), rq, rr);
    core::ComparisonPair p;
    p.query.id = "ext-" + std::to_string(index);
    p.query.text = cq;
    p.chosen = cr;
    p.rejected = rr;
    p.chosen_config = {"ext-chosen", 1, 0, 1, 1};
    p.rejected_config = {"ext-rejected", 1, 0, 1, 2};
    if (p.chosen == p.rejected)
        throw std::runtime_error("record " + std::to_string(index) +
                                 ": identical chosen and rejected");
    return p;
}

inline std::vector<core::ComparisonPair> convert_transcript_file(const std::string& path) {
    std::vector<std::string> lines = core::read_lines(path);
    std::vector<core::ComparisonPair> out;
    for (size_t i = 0; i < lines.size(); ++i) {
        if (util::trim(lines[i]).empty()) continue;
        nlohmann::json j = nlohmann::json::parse(lines[i]);
        out.push_back(convert_transcript_record(j, i));
    }
    if (out.empty()) throw std::runtime_error(path + ": no records");
    return out;
}

} // namespace synthfeed::rm

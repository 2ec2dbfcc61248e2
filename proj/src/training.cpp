#include "fdiag/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <stdexcept>

#include "fdiag/dataset.hpp"

namespace fdiag {

namespace {

// Seed streams of the training loop.
constexpr std::uint64_t kSplitStream = 0x5b11;
constexpr std::uint64_t kEpochStream = 0xe90c;
constexpr std::uint64_t kLabeledStream = 0x1abe;
constexpr std::uint64_t kUnlabeledStream = 0x0b1a;

std::uint64_t derive(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
    return mix64(mix64(seed ^ mix64(stream)) + index);
}

// Endless reshuffled pass over a fixed pool.
class CyclingStream {
public:
    CyclingStream(std::vector<std::size_t> pool, std::uint64_t seed) : pool_(std::move(pool)), rng_(seed) { reshuffle(); }

    bool empty() const { return pool_.empty(); }

    // Up to n distinct items.
    std::vector<std::size_t> next(std::size_t n) {
        std::vector<std::size_t> out;
        n = std::min(n, pool_.size());
        while (out.size() < n) {
            if (pos_ == order_.size()) reshuffle();
            out.push_back(order_[pos_++]);
        }
        return out;
    }

private:
    void reshuffle() {
        order_ = pool_;
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
    }

    std::vector<std::size_t> pool_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
    std::mt19937_64 rng_;
};

std::vector<FaultCondition> pick(const std::vector<FaultCondition>& conds, std::span<const std::size_t> rows) {
    std::vector<FaultCondition> out;
    out.reserve(rows.size());
    for (auto r : rows) out.push_back(conds[r]);
    return out;
}

void accumulate(LossTerms& acc, const LossTerms& t) {
    acc.cce_src += t.cce_src;
    acc.cce_tgt += t.cce_tgt;
    acc.mmd += t.mmd;
    acc.em += t.em;
    acc.total += t.total;
}

LossTerms scaled(LossTerms t, double s) {
    t.cce_src *= s;
    t.cce_tgt *= s;
    t.mmd *= s;
    t.em *= s;
    t.total *= s;
    return t;
}

// Overflowing activations surface as domain_error from the normalizer.
template <typename F>
auto numerically_guarded(F&& f) {
    try {
        return f();
    } catch (const std::domain_error& e) {
        throw NumericalError(e.what());
    }
}

void optimize_step(ModelParams<float>& params, OptState<float>& opt, const DaBatch<float>& batch,
                   const TrainConfig& cfg, const LossWeights& weights, LossTerms& acc) {
    auto loss = numerically_guarded([&] { return total_finetune_loss<float>(params, batch, weights, cfg.mmd, Mode::Train); });
    if (!std::isfinite(loss.terms.total)) throw NumericalError("non-finite training loss");
    adam_step<float>(params, loss.grads, opt, cfg.lr, cfg.adam);
    commit_running_stats<float>(params, loss.cache, static_cast<float>(cfg.bn_momentum));
    if (!params.all_finite()) throw NumericalError("non-finite parameter after optimizer step");
    accumulate(acc, loss.terms);
}

void mark_selected(TrainResult& res) {
    for (auto& rec : res.history) rec.selected = rec.epoch == res.best_epoch;
}

}  // namespace

std::vector<std::vector<std::size_t>> epoch_batches(std::vector<std::size_t> items, std::size_t batch_size,
                                                    std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::shuffle(items.begin(), items.end(), rng);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t begin = 0; begin < items.size(); begin += batch_size) {
        const std::size_t end = std::min(items.size(), begin + batch_size);
        out.emplace_back(items.begin() + static_cast<std::ptrdiff_t>(begin), items.begin() + static_cast<std::ptrdiff_t>(end));
    }
    if (out.size() >= 2 && out.back().size() == 1) {
        out[out.size() - 2].push_back(out.back()[0]);
        out.pop_back();
    }
    return out;
}

void TrainConfig::validate() const {
    if (pretrain_epochs < 1 || finetune_epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
    if (!(lr >= 0.0)) throw std::invalid_argument("train: lr must be non-negative");
    if (batch_size < 2) throw std::invalid_argument("train: batch_size must be >= 2");
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
        throw std::invalid_argument("train: validation_fraction must lie in (0, 1)");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 && adam.eps > 0.0))
        throw std::invalid_argument("train: invalid Adam hyperparameters");
    if (weights.mmd < 0.0 || weights.em < 0.0) throw std::invalid_argument("train: loss weights must be >= 0");
    mmd.validate();
}

template <typename T>
void adam_step(ModelParams<T>& params, const ModelParams<T>& grads, OptState<T>& state, double lr,
               const AdamConfig& cfg) {
    if (grads.tensors.size() != params.tensors.size()) throw std::invalid_argument("adam_step: gradient layout mismatch");
    if (state.m.empty()) {
        for (const auto& t : params.tensors) {
            state.m.emplace_back(t.values.size(), T(0));
            state.v.emplace_back(t.values.size(), T(0));
        }
    }
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
        if (grads.tensors[i].values.size() != params.tensors[i].values.size())
            throw std::invalid_argument("adam_step: shape mismatch for '" + params.tensors[i].name + "'");
        if (!params.tensors[i].trainable) continue;
        for (T g : grads.tensors[i].values)
            if (!std::isfinite(g)) throw NumericalError("non-finite gradient for parameter '" + params.tensors[i].name + "'");
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
        auto& p = params.tensors[i];
        if (!p.trainable) continue;
        const auto& g = grads.tensors[i].values;
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t k = 0; k < p.values.size(); ++k) {
            const double gk = g[k];
            const double mk = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            const double vk = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            m[k] = static_cast<T>(mk);
            v[k] = static_cast<T>(vk);
            p.values[k] = static_cast<T>(p.values[k] - lr * (mk / c1) / (std::sqrt(vk / c2) + cfg.eps));
        }
    }
}

template void adam_step<float>(ModelParams<float>&, const ModelParams<float>&, OptState<float>&, double, const AdamConfig&);
template void adam_step<double>(ModelParams<double>&, const ModelParams<double>&, OptState<double>&, double,
                                const AdamConfig&);

std::vector<std::size_t> FeatureSet::labeled_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labeled.size(); ++i)
        if (labeled[i]) out.push_back(i);
    return out;
}

std::vector<std::size_t> FeatureSet::unlabeled_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labeled.size(); ++i)
        if (!labeled[i]) out.push_back(i);
    return out;
}

FeatureSet FeatureSet::all_labeled() const {
    FeatureSet out = *this;
    std::fill(out.labeled.begin(), out.labeled.end(), true);
    return out;
}

FeatureSet FeatureSet::subset(std::span<const std::size_t> rows) const {
    FeatureSet out;
    out.x = gather_batch(x, rows);
    for (auto r : rows) {
        out.conds.push_back(conds[r]);
        out.labeled.push_back(labeled[r]);
    }
    return out;
}

Split stratified_split(std::span<const FaultCondition> conds, std::span<const std::size_t> pool, double fraction,
                       std::uint64_t seed) {
    std::map<int, std::vector<std::size_t>> by_class;
    for (auto i : pool) by_class[joint_from_levels(conds[i])].push_back(i);

    std::mt19937_64 rng(seed);
    struct Quota {
        int cls;
        std::size_t take;
        double remainder;
        std::uint64_t tie;
    };
    std::vector<Quota> quotas;
    std::size_t assigned = 0;
    for (auto& [cls, members] : by_class) {
        std::shuffle(members.begin(), members.end(), rng);
        const double exact = fraction * static_cast<double>(members.size());
        const auto base = static_cast<std::size_t>(std::floor(exact + 1e-9));
        quotas.push_back({cls, base, exact - static_cast<double>(base), rng()});
        assigned += base;
    }
    const auto target = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(pool.size())));
    std::vector<std::size_t> order(quotas.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (quotas[a].remainder != quotas[b].remainder) return quotas[a].remainder > quotas[b].remainder;
        return quotas[a].tie < quotas[b].tie;
    });
    for (std::size_t k = 0; assigned < target && k < order.size(); ++k) {
        auto& q = quotas[order[k]];
        if (q.take < by_class[q.cls].size()) {
            ++q.take;
            ++assigned;
        }
    }

    Split split;
    for (const auto& q : quotas) {
        const auto& members = by_class[q.cls];
        split.val.insert(split.val.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(q.take));
        split.train.insert(split.train.end(), members.begin() + static_cast<std::ptrdiff_t>(q.take), members.end());
    }
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.val.begin(), split.val.end());
    return split;
}

ForwardOut<float> infer(const ModelParams<float>& params, const Tensor4<float>& x, std::size_t chunk) {
    ForwardOut<float> out;
    const std::size_t n = x.batch();
    const auto sizes = params.arch.head_sizes();
    out.h.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(params.arch.feature_dim));
    for (auto k : sizes) out.logits.emplace_back(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k));
    std::vector<std::size_t> rows;
    for (std::size_t begin = 0; begin < n; begin += chunk) {
        const std::size_t count = std::min(chunk, n - begin);
        rows.resize(count);
        std::iota(rows.begin(), rows.end(), begin);
        const auto fr = forward(params, gather_batch(x, rows), Mode::Infer);
        out.h.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count)) = fr.out.h;
        for (std::size_t j = 0; j < sizes.size(); ++j)
            out.logits[j].middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count)) = fr.out.logits[j];
    }
    return out;
}

double validation_cce(const ModelParams<float>& params, const FeatureSet& data, std::span<const std::size_t> rows) {
    if (rows.empty()) throw std::invalid_argument("validation_cce: empty validation split");
    const auto out = numerically_guarded([&] { return infer(params, gather_batch(data.x, rows)); });
    const auto conds = pick(data.conds, rows);
    const auto labels = head_labels(conds, params.arch.head_mode);
    double total = 0.0;
    for (std::size_t j = 0; j < out.logits.size(); ++j) {
        // Scored in double so the selection criterion does not depend on float rounding of the loss.
        const Matrix<double> l = out.logits[j].cast<double>();
        total += cce<double>(l, labels[j]).value;
    }
    return total;
}

TrainResult pretrain_source(const ModelParams<float>& init, const FeatureSet& src, const TrainConfig& cfg) {
    cfg.validate();
    if (src.size() == 0) throw std::invalid_argument("pretrain_source: empty dataset");
    if (src.labeled_indices().size() != src.size())
        throw std::invalid_argument("pretrain_source: source samples must all be labeled");

    std::vector<std::size_t> all(src.size());
    std::iota(all.begin(), all.end(), 0);
    const Split split = stratified_split(src.conds, all, cfg.validation_fraction, derive(cfg.seed, kSplitStream, 1));
    if (split.train.size() < 2) throw std::invalid_argument("pretrain_source: too few training samples");

    TrainResult res;
    res.params = init;
    OptState<float> opt;
    double best_val = std::numeric_limits<double>::infinity();
    ModelParams<float> best = init;
    const LossWeights supervised_only{0.0, 0.0};

    for (std::size_t epoch = 1; epoch <= cfg.pretrain_epochs; ++epoch) {
        LossTerms acc;
        const auto batches = epoch_batches(split.train, cfg.batch_size, derive(cfg.seed, kEpochStream, epoch));
        for (const auto& rows : batches) {
            DaBatch<float> batch;
            batch.src_x = gather_batch(src.x, rows);
            batch.src_labels = pick(src.conds, rows);
            optimize_step(res.params, opt, batch, cfg, supervised_only, acc);
        }
        EpochRecord rec;
        rec.phase = Phase::Pretrain;
        rec.epoch = epoch;
        rec.train = scaled(acc, 1.0 / static_cast<double>(batches.size()));
        rec.has_val = !split.val.empty();
        if (rec.has_val) {
            rec.val_loss = validation_cce(res.params, src, split.val);
            if (rec.val_loss < best_val) {
                best_val = rec.val_loss;
                best = res.params;
                res.best_epoch = epoch;
            }
        }
        res.history.push_back(rec);
    }
    if (res.best_epoch == 0) {
        res.warnings.push_back("pretrain: no validation samples; keeping final-epoch parameters");
        res.best_epoch = cfg.pretrain_epochs;
    } else {
        res.params = std::move(best);
    }
    mark_selected(res);
    return res;
}

TrainResult finetune_target(const ModelParams<float>& init, const FeatureSet& src, const FeatureSet& tgt,
                            const TrainConfig& cfg) {
    cfg.validate();
    if (src.size() == 0 || tgt.size() == 0) throw std::invalid_argument("finetune_target: empty dataset");
    if (src.labeled_indices().size() != src.size())
        throw std::invalid_argument("finetune_target: source samples must all be labeled");

    std::vector<std::size_t> all(src.size());
    std::iota(all.begin(), all.end(), 0);
    const Split src_split = stratified_split(src.conds, all, cfg.validation_fraction, derive(cfg.seed, kSplitStream, 1));
    const auto tgt_labeled = tgt.labeled_indices();
    const Split tgt_split =
        stratified_split(tgt.conds, tgt_labeled, cfg.validation_fraction, derive(cfg.seed, kSplitStream, 2));

    TrainResult res;
    res.params = init;
    if (tgt_split.val.empty())
        res.warnings.push_back("finetune: target has no labeled validation samples; keeping final-epoch parameters");

    CyclingStream labeled_stream(tgt_split.train, derive(cfg.seed, kLabeledStream));
    CyclingStream unlabeled_stream(tgt.unlabeled_indices(), derive(cfg.seed, kUnlabeledStream));
    OptState<float> opt;
    double best_val = std::numeric_limits<double>::infinity();
    ModelParams<float> best = init;

    for (std::size_t epoch = 1; epoch <= cfg.finetune_epochs; ++epoch) {
        LossTerms acc;
        const auto batches =
            epoch_batches(src_split.train, cfg.batch_size, derive(cfg.seed, kEpochStream, 1000 + epoch));
        for (const auto& rows : batches) {
            DaBatch<float> batch;
            batch.src_x = gather_batch(src.x, rows);
            batch.src_labels = pick(src.conds, rows);
            const auto lrows = labeled_stream.next(cfg.batch_size);
            batch.tgt_labeled_x = gather_batch(tgt.x, lrows);
            batch.tgt_labels = pick(tgt.conds, lrows);
            const auto urows = unlabeled_stream.next(cfg.batch_size);
            batch.tgt_unlabeled_x = gather_batch(tgt.x, urows);
            optimize_step(res.params, opt, batch, cfg, cfg.weights, acc);
        }
        EpochRecord rec;
        rec.phase = Phase::Finetune;
        rec.epoch = epoch;
        rec.train = scaled(acc, 1.0 / static_cast<double>(batches.size()));
        rec.has_val = !tgt_split.val.empty();
        if (rec.has_val) {
            rec.val_loss = validation_cce(res.params, tgt, tgt_split.val);
            if (rec.val_loss < best_val) {
                best_val = rec.val_loss;
                best = res.params;
                res.best_epoch = epoch;
            }
        }
        res.history.push_back(rec);
    }
    if (res.best_epoch == 0) {
        res.best_epoch = cfg.finetune_epochs;
    } else {
        res.params = std::move(best);
    }
    mark_selected(res);
    return res;
}

std::string phase_name(Phase p) { return p == Phase::Pretrain ? "pretrain" : "finetune"; }

void write_history_csv(std::ostream& os, std::span<const EpochRecord> history) {
    os << "epoch,phase,phase_epoch,cce_src,cce_tgt,mmd,em,train_total,val_loss,selected\n";
    char buf[512];
    for (std::size_t i = 0; i < history.size(); ++i) {
        const auto& r = history[i];
        char val[32] = "";
        if (r.has_val) std::snprintf(val, sizeof val, "%.9g", r.val_loss);
        std::snprintf(buf, sizeof buf, "%zu,%s,%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%s,%d\n", i + 1, phase_name(r.phase).c_str(),
                      r.epoch, r.train.cce_src, r.train.cce_tgt, r.train.mmd, r.train.em, r.train.total, val,
                      r.selected ? 1 : 0);
        os << buf;
    }
}

}  // namespace fdiag

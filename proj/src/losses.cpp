#include "fdiag/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fdiag {

namespace {

using MatD = Matrix<double>;

// Natural-log softmax of one row, computed stably.
template <typename Row>
Eigen::RowVectorXd log_softmax_row(const Row& z) {
    const Eigen::RowVectorXd zd = z.template cast<double>();
    const double mx = zd.maxCoeff();
    const double lse = mx + std::log((zd.array() - mx).exp().sum());
    return (zd.array() - lse).matrix();
}

// True when a should be treated as the first argument of the MMD estimator.
template <typename T>
bool canonical_first(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.rows() != b.rows()) return a.rows() < b.rows();
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        if (a.data()[i] < b.data()[i]) return true;
        if (b.data()[i] < a.data()[i]) return false;
    }
    return true;
}

MatD pairwise_sq_dist(const MatD& a, const MatD& b) {
    MatD d(a.rows(), b.rows());
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < b.rows(); ++j) d(i, j) = (a.row(i) - b.row(j)).squaredNorm();
    return d;
}

}  // namespace

template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& logits) {
    Matrix<T> out(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r)
        out.row(r) = log_softmax_row(logits.row(r)).array().exp().matrix().template cast<T>();
    return out;
}

template <typename T>
LossGrad<T> cce(const Matrix<T>& logits, std::span<const int> labels) {
    const Eigen::Index rows = logits.rows();
    if (rows == 0) throw std::invalid_argument("cce: empty batch");
    if (static_cast<std::size_t>(rows) != labels.size()) throw std::invalid_argument("cce: label count mismatch");
    LossGrad<T> out;
    out.grad.resize(rows, logits.cols());
    double total = 0.0;
    const double inv = 1.0 / static_cast<double>(rows);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const int y = labels[static_cast<std::size_t>(r)];
        if (y < 0 || y >= logits.cols()) throw std::invalid_argument("cce: label out of range");
        const Eigen::RowVectorXd lp = log_softmax_row(logits.row(r));
        total -= lp(y);
        Eigen::RowVectorXd g = lp.array().exp();
        g(y) -= 1.0;
        out.grad.row(r) = (g * inv).template cast<T>();
    }
    out.value = static_cast<T>(total * inv);
    return out;
}

template <typename T>
LossGrad<T> entropy_min(const Matrix<T>& logits) {
    const Eigen::Index rows = logits.rows();
    if (rows == 0) throw std::invalid_argument("entropy_min: empty batch");
    LossGrad<T> out;
    out.grad.resize(rows, logits.cols());
    double total = 0.0;
    const double inv = 1.0 / static_cast<double>(rows);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const Eigen::RowVectorXd lp = log_softmax_row(logits.row(r));
        const Eigen::RowVectorXd p = lp.array().exp();
        const double h = -(p.array() * lp.array()).sum();
        total += h;
        out.grad.row(r) = (-(p.array() * (lp.array() + h)) * inv).matrix().template cast<T>();
    }
    out.value = static_cast<T>(total * inv);
    return out;
}

template <typename T>
T cce_heads(std::span<const Matrix<T>> logits, std::span<const std::vector<int>> labels,
            std::vector<Matrix<T>>* grads) {
    if (logits.size() != labels.size()) throw std::invalid_argument("cce_heads: head count mismatch");
    T total = T(0);
    if (grads) grads->clear();
    for (std::size_t j = 0; j < logits.size(); ++j) {
        auto lg = cce<T>(logits[j], labels[j]);
        total += lg.value;
        if (grads) grads->push_back(std::move(lg.grad));
    }
    return total;
}

template <typename T>
T entropy_min_heads(std::span<const Matrix<T>> logits, std::vector<Matrix<T>>* grads) {
    T total = T(0);
    if (grads) grads->clear();
    for (const auto& l : logits) {
        auto lg = entropy_min<T>(l);
        total += lg.value;
        if (grads) grads->push_back(std::move(lg.grad));
    }
    return total;
}

void MkMmdConfig::validate() const {
    if (bandwidth_multipliers.empty()) throw std::invalid_argument("mk_mmd: kernel bank is empty");
    for (double m : bandwidth_multipliers)
        if (!(m > 0.0)) throw std::invalid_argument("mk_mmd: bandwidth multipliers must be positive");
    if (fixed_base_bandwidth && !(*fixed_base_bandwidth > 0.0))
        throw std::invalid_argument("mk_mmd: fixed bandwidth must be positive");
}

template <typename T>
double median_heuristic_bandwidth(const Matrix<T>& src, const Matrix<T>& tgt) {
    MatD pooled(src.rows() + tgt.rows(), src.cols());
    pooled << src.template cast<double>(), tgt.template cast<double>();
    std::vector<double> d;
    d.reserve(static_cast<std::size_t>(pooled.rows() * (pooled.rows() - 1) / 2));
    for (Eigen::Index i = 0; i < pooled.rows(); ++i)
        for (Eigen::Index j = i + 1; j < pooled.rows(); ++j) d.push_back((pooled.row(i) - pooled.row(j)).squaredNorm());
    if (d.empty()) return 1.0;
    std::sort(d.begin(), d.end());
    const std::size_t n = d.size();
    const double med = n % 2 == 1 ? d[n / 2] : 0.5 * (d[n / 2 - 1] + d[n / 2]);
    return med > 0.0 ? med : 1.0;
}

template <typename T>
MmdResult<T> mk_mmd(const Matrix<T>& src, const Matrix<T>& tgt, const MkMmdConfig& cfg) {
    cfg.validate();
    if (src.cols() != tgt.cols()) throw std::invalid_argument("mk_mmd: feature dimensions differ");
    const Eigen::Index min_rows = cfg.estimator == MmdEstimator::Unbiased ? 2 : 1;
    if (src.rows() < min_rows || tgt.rows() < min_rows)
        throw std::invalid_argument("mk_mmd: too few samples for the estimator");

    // Evaluate in a canonical argument order so that swapping src and tgt
    // reproduces the same floating-point operations.
    if (!canonical_first(src, tgt)) {
        auto swapped = mk_mmd(tgt, src, cfg);
        std::swap(swapped.grad_src, swapped.grad_tgt);
        return swapped;
    }

    const MatD x = src.template cast<double>();
    const MatD y = tgt.template cast<double>();
    const double n = static_cast<double>(x.rows());
    const double m = static_cast<double>(y.rows());
    const double base = cfg.fixed_base_bandwidth ? *cfg.fixed_base_bandwidth : median_heuristic_bandwidth(src, tgt);

    const auto kernel = [&](const MatD& d2, MatD& k, MatD& kp) {
        k = MatD::Zero(d2.rows(), d2.cols());
        kp = MatD::Zero(d2.rows(), d2.cols());
        const double inv_l = 1.0 / static_cast<double>(cfg.bandwidth_multipliers.size());
        for (double mult : cfg.bandwidth_multipliers) {
            const double s2 = mult * base;
            const MatD e = (-d2.array() / (2.0 * s2)).exp().matrix();
            k += inv_l * e;
            kp += (inv_l / s2) * e;
        }
    };
    MatD kxx, kyy, kxy, pxx, pyy, pxy;
    kernel(pairwise_sq_dist(x, x), kxx, pxx);
    kernel(pairwise_sq_dist(y, y), kyy, pyy);
    kernel(pairwise_sq_dist(x, y), kxy, pxy);

    const bool unbiased = cfg.estimator == MmdEstimator::Unbiased;
    const double cxx = unbiased ? 1.0 / (n * (n - 1.0)) : 1.0 / (n * n);
    const double cyy = unbiased ? 1.0 / (m * (m - 1.0)) : 1.0 / (m * m);
    const double cxy = 1.0 / (n * m);
    if (unbiased) {
        kxx.diagonal().setZero();
        kyy.diagonal().setZero();
        pxx.diagonal().setZero();
        pyy.diagonal().setZero();
    }

    const auto ordered_sum = [](const MatD& k) {
        double s = 0.0;
        for (Eigen::Index i = 0; i < k.size(); ++i) s += k.data()[i];
        return s;
    };
    const double t_xx = ordered_sum(kxx) * cxx;
    const double t_yy = ordered_sum(kyy) * cyy;
    const double t_xy = ordered_sum(kxy) * cxy;

    MmdResult<T> out;
    out.base_bandwidth = base;
    out.value = static_cast<T>(t_xx + t_yy - 2.0 * t_xy);

    // d k(a, b) / d a = -kp(a, b) * (a - b). Each within-set pair appears in
    // both orders, each cross pair once with weight -2 * cxy.
    const MatD wxx = cxx * pxx;
    const MatD wyy = cyy * pyy;
    const MatD wxy = cxy * pxy;
    const MatD gx = -2.0 * (wxx.rowwise().sum().asDiagonal() * x - wxx * x) +
                    2.0 * (wxy.rowwise().sum().asDiagonal() * x - wxy * y);
    const MatD gy = -2.0 * (wyy.rowwise().sum().asDiagonal() * y - wyy * y) +
                    2.0 * (wxy.colwise().sum().transpose().asDiagonal() * y - wxy.transpose() * x);
    out.grad_src = gx.template cast<T>();
    out.grad_tgt = gy.template cast<T>();
    return out;
}

template <typename T>
CompositeLoss<T> total_finetune_loss(const ModelParams<T>& params, const DaBatch<T>& batch, const LossWeights& w,
                                     const MkMmdConfig& mmd_cfg, Mode mode) {
    const std::size_t ns = batch.src_x.batch();
    const std::size_t nl = batch.tgt_labeled_x.batch();
    const std::size_t nu = batch.tgt_unlabeled_x.batch();
    if (ns == 0) throw std::invalid_argument("total_finetune_loss: empty source batch");
    if (batch.src_labels.size() != ns || batch.tgt_labels.size() != nl)
        throw std::invalid_argument("total_finetune_loss: label count mismatch");

    const std::array<const Tensor4<T>*, 3> parts{&batch.src_x, &batch.tgt_labeled_x, &batch.tgt_unlabeled_x};
    const Tensor4<T> x = concat_batch<T>(parts);
    auto fr = forward(params, x, mode);
    const HeadMode head_mode = params.arch.head_mode;
    const auto& logits = fr.out.logits;

    std::vector<Matrix<T>> dlogits;
    for (const auto& l : logits) dlogits.push_back(Matrix<T>::Zero(l.rows(), l.cols()));

    CompositeLoss<T> res;
    const auto rows = [](const Matrix<T>& m, std::size_t begin, std::size_t count) {
        return Matrix<T>(m.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count)));
    };
    const auto supervised = [&](std::size_t begin, std::size_t count, std::span<const FaultCondition> conds) {
        const auto labels = head_labels(conds, head_mode);
        double total = 0.0;
        for (std::size_t j = 0; j < logits.size(); ++j) {
            auto lg = cce<T>(rows(logits[j], begin, count), labels[j]);
            total += static_cast<double>(lg.value);
            dlogits[j].middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count)) += lg.grad;
        }
        return total;
    };

    res.terms.cce_src = supervised(0, ns, batch.src_labels);
    if (nl > 0) res.terms.cce_tgt = supervised(ns, nl, batch.tgt_labels);

    if (w.em != 0.0 && nu > 0) {
        double total = 0.0;
        for (std::size_t j = 0; j < logits.size(); ++j) {
            auto lg = entropy_min<T>(rows(logits[j], ns + nl, nu));
            total += static_cast<double>(lg.value);
            dlogits[j].middleRows(static_cast<Eigen::Index>(ns + nl), static_cast<Eigen::Index>(nu)) +=
                static_cast<T>(w.em) * lg.grad;
        }
        res.terms.em = total;
    }

    Matrix<T> dh;
    const std::size_t nt = nl + nu;
    const std::size_t min_rows = mmd_cfg.estimator == MmdEstimator::Unbiased ? 2 : 1;
    const bool use_mmd = w.mmd != 0.0 && ns >= min_rows && nt >= min_rows;
    if (use_mmd) {
        auto mr = mk_mmd<T>(rows(fr.out.h, 0, ns), rows(fr.out.h, ns, nt), mmd_cfg);
        res.terms.mmd = static_cast<double>(mr.value);
        dh = Matrix<T>::Zero(fr.out.h.rows(), fr.out.h.cols());
        dh.topRows(static_cast<Eigen::Index>(ns)) = static_cast<T>(w.mmd) * mr.grad_src;
        dh.bottomRows(static_cast<Eigen::Index>(nt)) = static_cast<T>(w.mmd) * mr.grad_tgt;
    }
    res.terms.total = res.terms.cce_src + res.terms.cce_tgt + w.mmd * res.terms.mmd + w.em * res.terms.em;
    res.grads = backward<T>(params, fr.cache, dlogits, use_mmd ? &dh : nullptr);
    res.cache = std::move(fr.cache);
    return res;
}

#define FDIAG_INSTANTIATE_LOSSES(T)                                                                            \
    template Matrix<T> softmax_rows<T>(const Matrix<T>&);                                                      \
    template LossGrad<T> cce<T>(const Matrix<T>&, std::span<const int>);                                       \
    template LossGrad<T> entropy_min<T>(const Matrix<T>&);                                                     \
    template T cce_heads<T>(std::span<const Matrix<T>>, std::span<const std::vector<int>>, std::vector<Matrix<T>>*); \
    template T entropy_min_heads<T>(std::span<const Matrix<T>>, std::vector<Matrix<T>>*);                      \
    template double median_heuristic_bandwidth<T>(const Matrix<T>&, const Matrix<T>&);                         \
    template MmdResult<T> mk_mmd<T>(const Matrix<T>&, const Matrix<T>&, const MkMmdConfig&);                   \
    template CompositeLoss<T> total_finetune_loss<T>(const ModelParams<T>&, const DaBatch<T>&, const LossWeights&, \
                                                     const MkMmdConfig&, Mode);

FDIAG_INSTANTIATE_LOSSES(float)
FDIAG_INSTANTIATE_LOSSES(double)

}  // namespace fdiag

#pragma once

#include <optional>
#include <span>
#include <vector>

#include "fdiag/model.hpp"
#include "fdiag/tensor.hpp"

namespace fdiag {

template <typename T>
struct LossGrad {
    T value = T(0);
    Matrix<T> grad;  // d value / d input, same shape as the input
};

// Mean over rows of -ln softmax(logits)[label].
template <typename T>
LossGrad<T> cce(const Matrix<T>& logits, std::span<const int> labels);

// Mean over rows of the Shannon entropy -sum p ln p of softmax(logits).
template <typename T>
LossGrad<T> entropy_min(const Matrix<T>& logits);

// Row-wise softmax with max subtraction.
template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& logits);

// Sums over heads; labels[j] belongs to logits[j].
template <typename T>
T cce_heads(std::span<const Matrix<T>> logits, std::span<const std::vector<int>> labels,
            std::vector<Matrix<T>>* grads = nullptr);
template <typename T>
T entropy_min_heads(std::span<const Matrix<T>> logits, std::vector<Matrix<T>>* grads = nullptr);

enum class MmdEstimator { Biased, Unbiased };

struct MkMmdConfig {
    std::vector<double> bandwidth_multipliers{0.25, 0.5, 1.0, 2.0, 4.0};
    // Unset: median of pooled pairwise squared distances, computed per call.
    std::optional<double> fixed_base_bandwidth;
    MmdEstimator estimator = MmdEstimator::Unbiased;

    void validate() const;
};

template <typename T>
struct MmdResult {
    T value = T(0);
    Matrix<T> grad_src;
    Matrix<T> grad_tgt;
    double base_bandwidth = 0.0;
};

// Median of the squared distances over all unordered pairs of distinct rows
// of the pooled sample; 1 when that median is 0.
template <typename T>
double median_heuristic_bandwidth(const Matrix<T>& src, const Matrix<T>& tgt);

// Squared MMD under k(a, b) = mean_i exp(-|a - b|^2 / (2 * multiplier_i * base)).
// The base bandwidth is treated as a constant when differentiating.
template <typename T>
MmdResult<T> mk_mmd(const Matrix<T>& src, const Matrix<T>& tgt, const MkMmdConfig& cfg);

struct LossWeights {
    double mmd = 1.0;
    double em = 0.1;
};

// One optimization batch, already featurized. Any target part may be empty.
template <typename T>
struct DaBatch {
    Tensor4<T> src_x;
    std::vector<FaultCondition> src_labels;
    Tensor4<T> tgt_labeled_x;
    std::vector<FaultCondition> tgt_labels;
    Tensor4<T> tgt_unlabeled_x;
};

struct LossTerms {
    double cce_src = 0.0;
    double cce_tgt = 0.0;
    double mmd = 0.0;
    double em = 0.0;
    double total = 0.0;
};

template <typename T>
struct CompositeLoss {
    LossTerms terms;
    ModelParams<T> grads;
    ForwardCache<T> cache;
};

// CCE(source) + CCE(target labeled) + w.mmd * MK-MMD(h_src, h_tgt) + w.em * EM(target unlabeled),
// where h_tgt pools labeled and unlabeled target rows. All parts go through
// one forward pass; terms whose inputs are empty (or too small for the MMD
// estimator) are skipped.
template <typename T>
CompositeLoss<T> total_finetune_loss(const ModelParams<T>& params, const DaBatch<T>& batch, const LossWeights& w,
                                     const MkMmdConfig& mmd_cfg, Mode mode = Mode::Train);

}  // namespace fdiag

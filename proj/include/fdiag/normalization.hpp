#pragma once

#include <array>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fdiag/tensor.hpp"

namespace fdiag {

// Normalization schemes over [B, C, F, T] tensors. Each computes a population
// mean and variance over a fixed set of axes:
//   BN  - (B, F, T) per channel
//   LN  - (C, F, T) per sample
//   TLN - T per (sample, channel, frequency)
//   IN  - (F, T) per (sample, channel)
//   FLN - F per (sample, channel, time frame)
enum class NormMethod { BN, LN, TLN, IN, FLN };

inline constexpr std::array<NormMethod, 5> kAllNormMethods{NormMethod::BN, NormMethod::LN, NormMethod::TLN,
                                                           NormMethod::IN, NormMethod::FLN};

enum class Mode { Train, Infer };

std::string_view to_string(NormMethod m);
NormMethod parse_norm_method(std::string_view s);

// Which of (B, C, F, T) are reduced when computing statistics.
std::array<bool, 4> reduced_axes(NormMethod m);
// Shape of the statistics tensor: reduced axes collapse to 1.
Dims4 stats_dims(NormMethod m, const Dims4& x_dims);

template <typename T>
struct NormStats {
    Tensor4<T> mean;
    Tensor4<T> var;
};

// Population statistics over the method's axes. BN requires B >= 2.
template <typename T>
NormStats<T> norm_stats(const Tensor4<T>& x, NormMethod method);

// Borrowed affine and running-statistic parameters; running stats are only read for BN.
template <typename T>
struct NormParamsView {
    std::span<const T> gamma;
    std::span<const T> beta;
    std::span<const T> running_mean;
    std::span<const T> running_var;
    T eps = T(1e-5);
};

template <typename T>
struct NormState {
    std::vector<T> gamma;
    std::vector<T> beta;
    std::vector<T> running_mean;
    std::vector<T> running_var;
    T eps = T(1e-5);
    T momentum = T(0.1);

    static NormState identity(std::size_t channels);
    NormParamsView<T> view() const { return {gamma, beta, running_mean, running_var, eps}; }
};

template <typename T>
struct NormCache {
    NormMethod method = NormMethod::FLN;
    Mode mode = Mode::Train;
    Tensor4<T> x_hat;
    std::vector<T> rstd;
    std::vector<T> gamma;
    // Per-channel batch statistics (BN in train mode) for the running update.
    std::vector<T> batch_mean;
    std::vector<T> batch_var;
};

template <typename T>
struct NormResult {
    Tensor4<T> y;
    NormCache<T> cache;
};

template <typename T>
struct NormGrads {
    Tensor4<T> dx;
    std::vector<T> dgamma;
    std::vector<T> dbeta;
};

// y = gamma[c] * (x - mean) / sqrt(var + eps) + beta[c]. Pure: BN running
// statistics are read in infer mode but never written.
template <typename T>
NormResult<T> normalize(const Tensor4<T>& x, NormMethod method, const NormParamsView<T>& params, Mode mode);

// As normalize(), and additionally folds the batch statistics into the
// state's running statistics for BN in train mode.
template <typename T>
NormResult<T> normalize_forward(const Tensor4<T>& x, NormMethod method, NormState<T>& state, Mode mode);

// running <- (1 - momentum) * running + momentum * batch, for BN train-mode caches.
template <typename T>
void update_running_stats(std::span<T> running_mean, std::span<T> running_var, const NormCache<T>& cache,
                          T momentum);

template <typename T>
NormGrads<T> normalize_backward(const NormCache<T>& cache, const Tensor4<T>& dy);

}  // namespace fdiag

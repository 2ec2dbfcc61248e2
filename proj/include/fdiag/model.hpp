#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fdiag/labels.hpp"
#include "fdiag/normalization.hpp"
#include "fdiag/tensor.hpp"

namespace fdiag {

// MCC: one softmax over the 36 joint conditions.
// MOC: one task-specific head per fault type with (2, 2, 3, 3) outputs.
enum class HeadMode { MCC, MOC };

std::string_view to_string(HeadMode m);
HeadMode parse_head_mode(std::string_view s);

struct ConvSpec {
    std::size_t out_channels = 16;
    std::size_t kernel = 3;
    std::size_t stride = 2;

    friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

struct ArchConfig {
    HeadMode head_mode = HeadMode::MOC;
    NormMethod norm_method = NormMethod::FLN;
    std::vector<ConvSpec> blocks{{16, 3, 2}, {32, 3, 2}, {64, 3, 2}};
    std::size_t feature_dim = 64;
    std::size_t input_channels = 1;

    void validate() const;
    std::vector<std::size_t> head_sizes() const;

    friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

// Spatial output size of a padded (kernel / 2) strided convolution.
std::size_t conv_output_size(std::size_t in, const ConvSpec& spec);

template <typename T>
struct ParamTensor {
    std::string name;
    std::vector<std::size_t> shape;
    AlignedVector<T> values;
    bool trainable = true;

    friend bool operator==(const ParamTensor&, const ParamTensor&) = default;
};

// Every tensor of the network in a fixed order: per block conv weight/bias,
// norm gamma/beta (plus BN running statistics, not trainable), then the heads.
template <typename T>
struct ModelParams {
    ArchConfig arch;
    std::vector<ParamTensor<T>> tensors;

    const ParamTensor<T>& at(std::string_view name) const;
    ParamTensor<T>& at(std::string_view name);
    std::size_t parameter_count(bool trainable_only = true) const;
    ModelParams zeros_like() const;
    bool all_finite() const;

    template <typename U>
    ModelParams<U> cast() const {
        ModelParams<U> out;
        out.arch = arch;
        for (const auto& t : tensors) {
            ParamTensor<U> u{t.name, t.shape, AlignedVector<U>(t.values.size()), t.trainable};
            for (std::size_t i = 0; i < t.values.size(); ++i) u.values[i] = static_cast<U>(t.values[i]);
            out.tensors.push_back(std::move(u));
        }
        return out;
    }

    friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

// Multipliers on the fan-in bounds of the weight draws. Convolutions feed a
// normalization, so their scale only sets the effective step size of Adam.
struct InitScale {
    double conv = 0.02;
    double head = 4.0;
};

// Weights uniform in +-conv*sqrt(6 / fan_in) for convolutions and
// +-head/sqrt(fan_in) for heads; biases +-1/sqrt(fan_in); gamma = 1, beta = 0;
// running stats (0, 1).
template <typename T>
ModelParams<T> init_params(const ArchConfig& arch, std::uint64_t seed, const InitScale& scale = {});

template <typename T>
struct ForwardOut {
    Matrix<T> h;                     // [B x feature_dim] pooled features
    std::vector<Matrix<T>> logits;   // one [B x K] block per head
};

template <typename T>
struct BlockCache {
    Dims4 in_dims{};
    Dims4 out_dims{};
    std::vector<Matrix<T>> cols;  // im2col per sample
    NormCache<T> norm;
    Tensor4<T> activation;        // post-ReLU
};

template <typename T>
struct ForwardCache {
    Mode mode = Mode::Train;
    std::vector<BlockCache<T>> blocks;
    Matrix<T> h;
};

template <typename T>
struct ForwardResult {
    ForwardOut<T> out;
    ForwardCache<T> cache;
};

// conv -> norm -> ReLU per block, global average pool over (F, T), affine heads.
template <typename T>
ForwardResult<T> forward(const ModelParams<T>& params, const Tensor4<T>& x, Mode mode);

// Gradients with respect to every parameter tensor (zero for running stats).
// dh, if given, is an extra gradient on the pooled features.
template <typename T>
ModelParams<T> backward(const ModelParams<T>& params, const ForwardCache<T>& cache,
                        std::span<const Matrix<T>> dlogits, const Matrix<T>* dh = nullptr);

// Folds BN batch statistics of a train-mode forward into the running statistics.
template <typename T>
void commit_running_stats(ModelParams<T>& params, const ForwardCache<T>& cache, T momentum = T(0.1));

// Per-row decoded conditions; argmax ties go to the lowest index.
template <typename T>
std::vector<FaultCondition> predict(const ForwardOut<T>& out, HeadMode mode);

// Class labels per head: MOC gives four vectors of levels, MCC one of joint indices.
std::vector<std::vector<int>> head_labels(std::span<const FaultCondition> conds, HeadMode mode);

template <typename T>
std::size_t argmax_row(const Matrix<T>& m, Eigen::Index row);

}  // namespace fdiag

#include "fdiag/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace fdiag {

namespace {

constexpr std::array<const char*, kNumFaults> kHeadNames{"irf", "orf", "mis", "unb"};

struct BlockSlots {
    std::size_t weight, bias, gamma, beta;
    std::size_t running_mean = SIZE_MAX, running_var = SIZE_MAX;
};

struct Slots {
    std::vector<BlockSlots> blocks;
    std::vector<std::pair<std::size_t, std::size_t>> heads;  // (weight, bias)
};

struct LayoutEntry {
    std::string name;
    std::vector<std::size_t> shape;
    bool trainable;
};

std::vector<LayoutEntry> layout(const ArchConfig& arch) {
    std::vector<LayoutEntry> out;
    std::size_t in = arch.input_channels;
    for (std::size_t i = 0; i < arch.blocks.size(); ++i) {
        const auto& b = arch.blocks[i];
        const std::string p = "block" + std::to_string(i);
        out.push_back({p + ".conv.weight", {b.out_channels, in, b.kernel, b.kernel}, true});
        out.push_back({p + ".conv.bias", {b.out_channels}, true});
        out.push_back({p + ".norm.gamma", {b.out_channels}, true});
        out.push_back({p + ".norm.beta", {b.out_channels}, true});
        if (arch.norm_method == NormMethod::BN) {
            out.push_back({p + ".norm.running_mean", {b.out_channels}, false});
            out.push_back({p + ".norm.running_var", {b.out_channels}, false});
        }
        in = b.out_channels;
    }
    const auto sizes = arch.head_sizes();
    for (std::size_t h = 0; h < sizes.size(); ++h) {
        const std::string p = std::string("head.") + (arch.head_mode == HeadMode::MOC ? kHeadNames[h] : "joint");
        out.push_back({p + ".weight", {sizes[h], arch.feature_dim}, true});
        out.push_back({p + ".bias", {sizes[h]}, true});
    }
    return out;
}

Slots slots_for(const ArchConfig& arch) {
    Slots s;
    std::size_t k = 0;
    for (std::size_t i = 0; i < arch.blocks.size(); ++i) {
        BlockSlots b{k, k + 1, k + 2, k + 3};
        k += 4;
        if (arch.norm_method == NormMethod::BN) {
            b.running_mean = k++;
            b.running_var = k++;
        }
        s.blocks.push_back(b);
    }
    for (std::size_t h = 0; h < arch.head_sizes().size(); ++h, k += 2) s.heads.emplace_back(k, k + 1);
    return s;
}

template <typename T>
void check_layout(const ModelParams<T>& params) {
    const auto expected = layout(params.arch);
    if (expected.size() != params.tensors.size())
        throw std::invalid_argument("model params: tensor count does not match architecture");
    for (std::size_t i = 0; i < expected.size(); ++i) {
        const auto& t = params.tensors[i];
        if (t.name != expected[i].name || t.shape != expected[i].shape)
            throw std::invalid_argument("model params: unexpected tensor '" + t.name + "'");
        std::size_t n = 1;
        for (auto d : t.shape) n *= d;
        if (t.values.size() != n) throw std::invalid_argument("model params: bad size for '" + t.name + "'");
    }
}

template <typename T>
void im2col(std::span<const T> x, std::size_t channels, std::size_t height, std::size_t width,
            const ConvSpec& spec, std::size_t out_h, std::size_t out_w, Matrix<T>& col) {
    const std::size_t k = spec.kernel;
    const auto pad = static_cast<std::ptrdiff_t>(k / 2);
    col.resize(static_cast<Eigen::Index>(channels * k * k), static_cast<Eigen::Index>(out_h * out_w));
    T* dst = col.data();
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t kh = 0; kh < k; ++kh)
            for (std::size_t kw = 0; kw < k; ++kw)
                for (std::size_t oh = 0; oh < out_h; ++oh) {
                    const auto ih = static_cast<std::ptrdiff_t>(oh * spec.stride + kh) - pad;
                    const bool row_ok = ih >= 0 && ih < static_cast<std::ptrdiff_t>(height);
                    const T* src = x.data() + (c * height + (row_ok ? static_cast<std::size_t>(ih) : 0)) * width;
                    for (std::size_t ow = 0; ow < out_w; ++ow) {
                        const auto iw = static_cast<std::ptrdiff_t>(ow * spec.stride + kw) - pad;
                        *dst++ = (row_ok && iw >= 0 && iw < static_cast<std::ptrdiff_t>(width)) ? src[iw] : T(0);
                    }
                }
}

template <typename T>
void col2im(const Matrix<T>& col, std::size_t channels, std::size_t height, std::size_t width,
            const ConvSpec& spec, std::size_t out_h, std::size_t out_w, std::span<T> dx) {
    const std::size_t k = spec.kernel;
    const auto pad = static_cast<std::ptrdiff_t>(k / 2);
    const T* src = col.data();
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t kh = 0; kh < k; ++kh)
            for (std::size_t kw = 0; kw < k; ++kw)
                for (std::size_t oh = 0; oh < out_h; ++oh) {
                    const auto ih = static_cast<std::ptrdiff_t>(oh * spec.stride + kh) - pad;
                    const bool row_ok = ih >= 0 && ih < static_cast<std::ptrdiff_t>(height);
                    T* row = dx.data() + (c * height + (row_ok ? static_cast<std::size_t>(ih) : 0)) * width;
                    for (std::size_t ow = 0; ow < out_w; ++ow, ++src) {
                        const auto iw = static_cast<std::ptrdiff_t>(ow * spec.stride + kw) - pad;
                        if (row_ok && iw >= 0 && iw < static_cast<std::ptrdiff_t>(width)) row[iw] += *src;
                    }
                }
}

}  // namespace

std::string_view to_string(HeadMode m) { return m == HeadMode::MOC ? "MOC" : "MCC"; }

HeadMode parse_head_mode(std::string_view s) {
    std::string up(s);
    for (auto& ch : up) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    if (up == "MOC") return HeadMode::MOC;
    if (up == "MCC") return HeadMode::MCC;
    throw std::invalid_argument("unknown head mode '" + std::string(s) + "'");
}

void ArchConfig::validate() const {
    if (blocks.empty()) throw std::invalid_argument("arch: at least one conv block required");
    if (input_channels == 0) throw std::invalid_argument("arch: input_channels must be positive");
    for (const auto& b : blocks) {
        if (b.out_channels == 0 || b.kernel == 0 || b.stride == 0)
            throw std::invalid_argument("arch: conv block fields must be positive");
        if (b.kernel % 2 == 0) throw std::invalid_argument("arch: conv kernels must be odd");
    }
    if (feature_dim != blocks.back().out_channels)
        throw std::invalid_argument("arch: feature_dim must equal the last block's out_channels");
}

std::vector<std::size_t> ArchConfig::head_sizes() const {
    if (head_mode == HeadMode::MCC) return {kNumJointClasses};
    return {kLevelCounts.begin(), kLevelCounts.end()};
}

std::size_t conv_output_size(std::size_t in, const ConvSpec& spec) {
    const std::size_t padded = in + 2 * (spec.kernel / 2);
    if (padded < spec.kernel) throw std::invalid_argument("conv: input smaller than kernel");
    return (padded - spec.kernel) / spec.stride + 1;
}

template <typename T>
const ParamTensor<T>& ModelParams<T>::at(std::string_view name) const {
    for (const auto& t : tensors)
        if (t.name == name) return t;
    throw std::out_of_range("no parameter tensor named '" + std::string(name) + "'");
}

template <typename T>
ParamTensor<T>& ModelParams<T>::at(std::string_view name) {
    return const_cast<ParamTensor<T>&>(std::as_const(*this).at(name));
}

template <typename T>
std::size_t ModelParams<T>::parameter_count(bool trainable_only) const {
    std::size_t n = 0;
    for (const auto& t : tensors)
        if (t.trainable || !trainable_only) n += t.values.size();
    return n;
}

template <typename T>
ModelParams<T> ModelParams<T>::zeros_like() const {
    ModelParams out = *this;
    for (auto& t : out.tensors) std::fill(t.values.begin(), t.values.end(), T(0));
    return out;
}

template <typename T>
bool ModelParams<T>::all_finite() const {
    for (const auto& t : tensors)
        for (T v : t.values)
            if (!std::isfinite(v)) return false;
    return true;
}

template <typename T>
ModelParams<T> init_params(const ArchConfig& arch, std::uint64_t seed, const InitScale& scale) {
    arch.validate();
    ModelParams<T> params;
    params.arch = arch;
    std::mt19937_64 rng(seed);
    for (const auto& e : layout(arch)) {
        ParamTensor<T> t{e.name, e.shape, {}, e.trainable};
        std::size_t n = 1;
        for (auto d : e.shape) n *= d;
        t.values.assign(n, T(0));
        const bool is_conv = e.name.find(".conv.") != std::string::npos;
        const bool is_head = e.name.rfind("head.", 0) == 0;
        const auto ends_with = [&](std::string_view suffix) {
            return e.name.size() >= suffix.size() && e.name.compare(e.name.size() - suffix.size(), suffix.size(), suffix) == 0;
        };
        if (is_conv || is_head) {
            // A bias takes the fan-in of its weight, which precedes it.
            const auto& w = ends_with(".weight") ? e.shape : params.tensors.back().shape;
            const std::size_t fan_in = is_conv ? w[1] * w[2] * w[3] : w[1];
            double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            if (ends_with(".weight"))
                bound = is_conv ? scale.conv * std::sqrt(6.0 / static_cast<double>(fan_in)) : scale.head * bound;
            std::uniform_real_distribution<double> dist(-bound, bound);
            for (auto& v : t.values) v = static_cast<T>(dist(rng));
        } else if (ends_with(".gamma") || ends_with(".running_var")) {
            std::fill(t.values.begin(), t.values.end(), T(1));
        }
        params.tensors.push_back(std::move(t));
    }
    return params;
}

template <typename T>
ForwardResult<T> forward(const ModelParams<T>& params, const Tensor4<T>& x, Mode mode) {
    const ArchConfig& arch = params.arch;
    check_layout(params);
    if (x.channels() != arch.input_channels)
        throw std::invalid_argument("forward: input has " + std::to_string(x.channels()) +
                                    " channels, architecture expects " + std::to_string(arch.input_channels));
    if (x.batch() == 0) throw std::invalid_argument("forward: empty batch");
    const Slots slots = slots_for(arch);

    ForwardResult<T> res;
    res.cache.mode = mode;
    const Tensor4<T>* input = &x;
    for (std::size_t i = 0; i < arch.blocks.size(); ++i) {
        const ConvSpec& spec = arch.blocks[i];
        const BlockSlots& s = slots.blocks[i];
        BlockCache<T> bc;
        bc.in_dims = input->dims();
        const std::size_t cin = input->channels();
        const std::size_t oh = conv_output_size(input->freq(), spec);
        const std::size_t ow = conv_output_size(input->time(), spec);
        const std::size_t cout = spec.out_channels;
        bc.out_dims = {input->batch(), cout, oh, ow};

        Tensor4<T> z(bc.out_dims);
        const ConstMatrixMap<T> w(params.tensors[s.weight].values.data(), static_cast<Eigen::Index>(cout),
                                  static_cast<Eigen::Index>(cin * spec.kernel * spec.kernel));
        const Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bias(params.tensors[s.bias].values.data(),
                                                                         static_cast<Eigen::Index>(cout));
        bc.cols.resize(input->batch());
        for (std::size_t b = 0; b < input->batch(); ++b) {
            im2col<T>(input->sample(b), cin, input->freq(), input->time(), spec, oh, ow, bc.cols[b]);
            MatrixMap<T> zb(z.sample(b).data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(oh * ow));
            zb.noalias() = w * bc.cols[b];
            zb.colwise() += bias;
        }

        NormParamsView<T> nv;
        nv.gamma = params.tensors[s.gamma].values;
        nv.beta = params.tensors[s.beta].values;
        if (s.running_mean != SIZE_MAX) {
            nv.running_mean = params.tensors[s.running_mean].values;
            nv.running_var = params.tensors[s.running_var].values;
        }
        auto normed = normalize(z, arch.norm_method, nv, mode);
        bc.norm = std::move(normed.cache);
        bc.activation = std::move(normed.y);
        for (T& v : bc.activation.values()) v = std::max(v, T(0));
        res.cache.blocks.push_back(std::move(bc));
        input = &res.cache.blocks.back().activation;
    }

    const Tensor4<T>& last = *input;
    const std::size_t plane = last.freq() * last.time();
    Matrix<T> h(static_cast<Eigen::Index>(last.batch()), static_cast<Eigen::Index>(last.channels()));
    for (std::size_t b = 0; b < last.batch(); ++b)
        for (std::size_t c = 0; c < last.channels(); ++c) {
            const T* p = last.data() + (b * last.channels() + c) * plane;
            double acc = 0.0;
            for (std::size_t k = 0; k < plane; ++k) acc += p[k];
            h(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(c)) = static_cast<T>(acc / static_cast<double>(plane));
        }

    const auto sizes = arch.head_sizes();
    for (std::size_t j = 0; j < sizes.size(); ++j) {
        const auto [wi, bi] = slots.heads[j];
        const ConstMatrixMap<T> w(params.tensors[wi].values.data(), static_cast<Eigen::Index>(sizes[j]),
                                  static_cast<Eigen::Index>(arch.feature_dim));
        const Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bias(params.tensors[bi].values.data(),
                                                                         static_cast<Eigen::Index>(sizes[j]));
        Matrix<T> logits = h * w.transpose();
        logits.rowwise() += bias;
        res.out.logits.push_back(std::move(logits));
    }
    res.out.h = h;
    res.cache.h = std::move(h);
    return res;
}

template <typename T>
ModelParams<T> backward(const ModelParams<T>& params, const ForwardCache<T>& cache,
                        std::span<const Matrix<T>> dlogits, const Matrix<T>* dh_extra) {
    const ArchConfig& arch = params.arch;
    const Slots slots = slots_for(arch);
    const auto sizes = arch.head_sizes();
    if (dlogits.size() != sizes.size()) throw std::invalid_argument("backward: wrong number of logit gradients");
    if (cache.blocks.size() != arch.blocks.size()) throw std::invalid_argument("backward: cache/arch mismatch");
    const Matrix<T>& h = cache.h;
    const Eigen::Index batch = h.rows();

    ModelParams<T> grads = params.zeros_like();
    Matrix<T> dh = Matrix<T>::Zero(batch, h.cols());
    if (dh_extra != nullptr) {
        if (dh_extra->rows() != batch || dh_extra->cols() != h.cols())
            throw std::invalid_argument("backward: dh shape mismatch");
        dh = *dh_extra;
    }
    for (std::size_t j = 0; j < sizes.size(); ++j) {
        const auto [wi, bi] = slots.heads[j];
        const Matrix<T>& g = dlogits[j];
        if (g.rows() != batch || g.cols() != static_cast<Eigen::Index>(sizes[j]))
            throw std::invalid_argument("backward: logit gradient shape mismatch for head " + std::to_string(j));
        const ConstMatrixMap<T> w(params.tensors[wi].values.data(), static_cast<Eigen::Index>(sizes[j]), h.cols());
        MatrixMap<T> dw(grads.tensors[wi].values.data(), static_cast<Eigen::Index>(sizes[j]), h.cols());
        dw.noalias() = g.transpose() * h;
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(grads.tensors[bi].values.data(), static_cast<Eigen::Index>(sizes[j]));
        db = g.colwise().sum();
        dh.noalias() += g * w;
    }

    // Global average pool.
    const BlockCache<T>& top = cache.blocks.back();
    Tensor4<T> dact(top.out_dims);
    {
        const std::size_t plane = top.out_dims[2] * top.out_dims[3];
        const T inv = T(1) / static_cast<T>(plane);
        for (std::size_t b = 0; b < top.out_dims[0]; ++b)
            for (std::size_t c = 0; c < top.out_dims[1]; ++c) {
                T* p = dact.data() + (b * top.out_dims[1] + c) * plane;
                const T v = dh(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(c)) * inv;
                std::fill(p, p + plane, v);
            }
    }

    for (std::size_t i = arch.blocks.size(); i-- > 0;) {
        const BlockCache<T>& bc = cache.blocks[i];
        const ConvSpec& spec = arch.blocks[i];
        const BlockSlots& s = slots.blocks[i];

        const T* a = bc.activation.data();
        T* d = dact.data();
        for (std::size_t k = 0; k < dact.size(); ++k)
            if (!(a[k] > T(0))) d[k] = T(0);

        auto ng = normalize_backward(bc.norm, dact);
        std::copy(ng.dgamma.begin(), ng.dgamma.end(), grads.tensors[s.gamma].values.begin());
        std::copy(ng.dbeta.begin(), ng.dbeta.end(), grads.tensors[s.beta].values.begin());

        const std::size_t cin = bc.in_dims[1];
        const std::size_t cout = spec.out_channels;
        const auto kk = static_cast<Eigen::Index>(cin * spec.kernel * spec.kernel);
        const auto p = static_cast<Eigen::Index>(bc.out_dims[2] * bc.out_dims[3]);
        const ConstMatrixMap<T> w(params.tensors[s.weight].values.data(), static_cast<Eigen::Index>(cout), kk);
        MatrixMap<T> dw(grads.tensors[s.weight].values.data(), static_cast<Eigen::Index>(cout), kk);
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> dbias(grads.tensors[s.bias].values.data(),
                                                             static_cast<Eigen::Index>(cout));
        const bool need_dx = i > 0;
        Tensor4<T> dx = need_dx ? Tensor4<T>(bc.in_dims) : Tensor4<T>();
        Matrix<T> dcol;
        for (std::size_t b = 0; b < bc.out_dims[0]; ++b) {
            const ConstMatrixMap<T> dz(ng.dx.sample(b).data(), static_cast<Eigen::Index>(cout), p);
            dw.noalias() += dz * bc.cols[b].transpose();
            dbias += dz.rowwise().sum();
            if (need_dx) {
                dcol.noalias() = w.transpose() * dz;
                col2im<T>(dcol, cin, bc.in_dims[2], bc.in_dims[3], spec, bc.out_dims[2], bc.out_dims[3], dx.sample(b));
            }
        }
        if (need_dx) dact = std::move(dx);
    }
    return grads;
}

template <typename T>
void commit_running_stats(ModelParams<T>& params, const ForwardCache<T>& cache, T momentum) {
    if (params.arch.norm_method != NormMethod::BN || cache.mode != Mode::Train) return;
    const Slots slots = slots_for(params.arch);
    for (std::size_t i = 0; i < cache.blocks.size(); ++i) {
        const auto& s = slots.blocks[i];
        update_running_stats<T>(params.tensors[s.running_mean].values, params.tensors[s.running_var].values,
                                cache.blocks[i].norm, momentum);
    }
}

template <typename T>
std::size_t argmax_row(const Matrix<T>& m, Eigen::Index row) {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < m.cols(); ++k)
        if (m(row, k) > m(row, best)) best = k;
    return static_cast<std::size_t>(best);
}

template <typename T>
std::vector<FaultCondition> predict(const ForwardOut<T>& out, HeadMode mode) {
    const std::size_t expected = mode == HeadMode::MOC ? kNumFaults : 1;
    if (out.logits.size() != expected) throw std::invalid_argument("predict: head count does not match head mode");
    const Eigen::Index rows = out.logits[0].rows();
    std::vector<FaultCondition> preds(static_cast<std::size_t>(rows));
    for (Eigen::Index r = 0; r < rows; ++r) {
        if (mode == HeadMode::MCC) {
            preds[static_cast<std::size_t>(r)] = levels_from_joint(static_cast<int>(argmax_row(out.logits[0], r)));
        } else {
            for (std::size_t f = 0; f < kNumFaults; ++f)
                preds[static_cast<std::size_t>(r)].level(f) = static_cast<int>(argmax_row(out.logits[f], r));
        }
    }
    return preds;
}

std::vector<std::vector<int>> head_labels(std::span<const FaultCondition> conds, HeadMode mode) {
    if (mode == HeadMode::MCC) {
        std::vector<int> joint;
        joint.reserve(conds.size());
        for (const auto& c : conds) joint.push_back(joint_from_levels(c));
        return {std::move(joint)};
    }
    std::vector<std::vector<int>> out(kNumFaults);
    for (const auto& c : conds)
        for (std::size_t f = 0; f < kNumFaults; ++f) out[f].push_back(c.level(f));
    return out;
}

#define FDIAG_INSTANTIATE_MODEL(T)                                                                                \
    template struct ModelParams<T>;                                                                               \
    template ModelParams<T> init_params<T>(const ArchConfig&, std::uint64_t, const InitScale&);                                         \
    template ForwardResult<T> forward<T>(const ModelParams<T>&, const Tensor4<T>&, Mode);                         \
    template ModelParams<T> backward<T>(const ModelParams<T>&, const ForwardCache<T>&, std::span<const Matrix<T>>, \
                                        const Matrix<T>*);                                                        \
    template void commit_running_stats<T>(ModelParams<T>&, const ForwardCache<T>&, T);                            \
    template std::size_t argmax_row<T>(const Matrix<T>&, Eigen::Index);                                           \
    template std::vector<FaultCondition> predict<T>(const ForwardOut<T>&, HeadMode);

FDIAG_INSTANTIATE_MODEL(float)
FDIAG_INSTANTIATE_MODEL(double)

}  // namespace fdiag

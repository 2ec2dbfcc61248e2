#include "fdiag/normalization.hpp"

#include <cmath>
#include <stdexcept>

#include <Eigen/Core>

namespace fdiag {

std::string_view to_string(NormMethod m) {
    switch (m) {
        case NormMethod::BN: return "BN";
        case NormMethod::LN: return "LN";
        case NormMethod::TLN: return "TLN";
        case NormMethod::IN: return "IN";
        case NormMethod::FLN: return "FLN";
    }
    return "?";
}

NormMethod parse_norm_method(std::string_view s) {
    std::string up(s);
    for (auto& ch : up) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    for (auto m : kAllNormMethods)
        if (to_string(m) == up) return m;
    throw std::invalid_argument("unknown normalization method '" + std::string(s) + "'");
}

std::array<bool, 4> reduced_axes(NormMethod m) {
    switch (m) {
        case NormMethod::BN: return {true, false, true, true};
        case NormMethod::LN: return {false, true, true, true};
        case NormMethod::TLN: return {false, false, false, true};
        case NormMethod::IN: return {false, false, true, true};
        case NormMethod::FLN: return {false, false, true, false};
    }
    throw std::logic_error("reduced_axes: bad method");
}

Dims4 stats_dims(NormMethod m, const Dims4& x_dims) {
    const auto red = reduced_axes(m);
    Dims4 out = x_dims;
    for (std::size_t a = 0; a < 4; ++a)
        if (red[a]) out[a] = 1;
    return out;
}

namespace {

// Maps every element of x to the flat index of its statistics group.
struct GroupIndex {
    Dims4 dims;
    Dims4 stride;  // 0 along reduced axes
    std::size_t groups = 0;
    std::size_t count = 0;  // elements per group

    GroupIndex(NormMethod m, const Dims4& x) : dims(x) {
        const auto sd = stats_dims(m, x);
        const auto red = reduced_axes(m);
        std::size_t s = 1;
        for (int a = 3; a >= 0; --a) {
            stride[a] = red[a] ? 0 : s;
            s *= sd[a];
        }
        groups = s;
        count = 1;
        for (std::size_t a = 0; a < 4; ++a)
            if (red[a]) count *= x[a];
    }

    // True when each row belongs to a single group.
    bool row_grouped() const { return stride[3] == 0; }
    // Elements per row: T, or the whole (F, T) plane when both are reduced.
    std::size_t row_length() const { return row_grouped() && stride[2] == 0 ? dims[2] * dims[3] : dims[3]; }

    // Calls fn(row_offset, group_of_first_element, channel) for every row in
    // memory order. Along a row the group index advances by stride[3] (0 or 1).
    template <typename Fn>
    void for_each_row(Fn&& fn) const {
        const std::size_t rows_per_channel = dims[2] * dims[3] / row_length();
        std::size_t i = 0;
        for (std::size_t b = 0; b < dims[0]; ++b)
            for (std::size_t c = 0; c < dims[1]; ++c)
                for (std::size_t f = 0; f < rows_per_channel; ++f, i += row_length())
                    fn(i, b * stride[0] + c * stride[1] + f * stride[2], c);
    }
};

template <typename T>
using RowMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using MutRowMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;

void check_dims(const Dims4& d) {
    for (auto v : d)
        if (v == 0) throw std::invalid_argument("normalization: all dims must be >= 1, got " + dims_string(d));
}

template <typename T>
void group_moments(const Tensor4<T>& x, const GroupIndex& gi, std::vector<double>& mean, std::vector<double>& var) {
    mean.assign(gi.groups, 0.0);
    var.assign(gi.groups, 0.0);
    const T* px = x.data();
    const auto n = static_cast<Eigen::Index>(gi.row_length());
    const bool rows = gi.row_grouped();
    gi.for_each_row([&](std::size_t off, std::size_t g, std::size_t) {
        const RowMap<T> r(px + off, n);
        if (rows) {
            mean[g] += r.template cast<double>().sum();
        } else {
            for (Eigen::Index t = 0; t < n; ++t) mean[g + t] += static_cast<double>(r[t]);
        }
    });
    const double inv = 1.0 / static_cast<double>(gi.count);
    for (auto& m : mean) m *= inv;
    gi.for_each_row([&](std::size_t off, std::size_t g, std::size_t) {
        const RowMap<T> r(px + off, n);
        if (rows) {
            var[g] += (r.template cast<double>() - mean[g]).square().sum();
        } else {
            for (Eigen::Index t = 0; t < n; ++t) {
                const double d = static_cast<double>(r[t]) - mean[g + t];
                var[g + t] += d * d;
            }
        }
    });
    for (auto& v : var) v *= inv;
}

}  // namespace

template <typename T>
NormStats<T> norm_stats(const Tensor4<T>& x, NormMethod method) {
    check_dims(x.dims());
    if (method == NormMethod::BN && x.batch() < 2)
        throw std::invalid_argument("norm_stats: BN needs a batch of at least 2");
    const GroupIndex gi(method, x.dims());
    std::vector<double> mean, var;
    group_moments(x, gi, mean, var);
    NormStats<T> out{Tensor4<T>(stats_dims(method, x.dims())), Tensor4<T>(stats_dims(method, x.dims()))};
    for (std::size_t g = 0; g < gi.groups; ++g) {
        out.mean.data()[g] = static_cast<T>(mean[g]);
        out.var.data()[g] = static_cast<T>(var[g]);
    }
    return out;
}

template <typename T>
NormState<T> NormState<T>::identity(std::size_t channels) {
    NormState s;
    s.gamma.assign(channels, T(1));
    s.beta.assign(channels, T(0));
    s.running_mean.assign(channels, T(0));
    s.running_var.assign(channels, T(1));
    return s;
}

template <typename T>
NormResult<T> normalize(const Tensor4<T>& x, NormMethod method, const NormParamsView<T>& params, Mode mode) {
    check_dims(x.dims());
    const std::size_t channels = x.channels();
    if (params.gamma.size() != channels || params.beta.size() != channels)
        throw std::invalid_argument("normalize: gamma/beta length must equal channel count");
    if (!(params.eps > T(0))) throw std::invalid_argument("normalize: eps must be positive");
    for (T v : x.values())
        if (!std::isfinite(v)) throw std::domain_error("normalize: non-finite input");

    const bool use_running = method == NormMethod::BN && mode == Mode::Infer;
    if (method == NormMethod::BN && mode == Mode::Train && x.batch() < 2)
        throw std::invalid_argument("normalize: BN in train mode needs a batch of at least 2");

    const GroupIndex gi(method, x.dims());
    std::vector<double> mean, var;
    NormResult<T> res;
    res.cache.method = method;
    res.cache.mode = mode;
    res.cache.gamma.assign(params.gamma.begin(), params.gamma.end());
    if (use_running) {
        if (params.running_mean.size() != channels || params.running_var.size() != channels)
            throw std::invalid_argument("normalize: BN inference needs running statistics per channel");
        mean.assign(params.running_mean.begin(), params.running_mean.end());
        var.assign(params.running_var.begin(), params.running_var.end());
    } else {
        group_moments(x, gi, mean, var);
        if (method == NormMethod::BN) {
            res.cache.batch_mean.assign(mean.begin(), mean.end());
            res.cache.batch_var.assign(var.begin(), var.end());
        }
    }

    res.cache.rstd.resize(gi.groups);
    for (std::size_t g = 0; g < gi.groups; ++g)
        res.cache.rstd[g] = static_cast<T>(1.0 / std::sqrt(var[g] + static_cast<double>(params.eps)));

    res.cache.x_hat = Tensor4<T>(x.dims());
    res.y = Tensor4<T>(x.dims());
    const T* px = x.data();
    T* ph = res.cache.x_hat.data();
    T* py = res.y.data();
    const auto n = static_cast<Eigen::Index>(gi.row_length());
    const bool rows = gi.row_grouped();
    const T* rstd = res.cache.rstd.data();
    gi.for_each_row([&](std::size_t off, std::size_t g, std::size_t c) {
        const RowMap<T> xr(px + off, n);
        MutRowMap<T> hr(ph + off, n);
        if (rows) {
            hr = (xr.template cast<double>() - mean[g]).template cast<T>() * rstd[g];
        } else {
            for (Eigen::Index t = 0; t < n; ++t)
                hr[t] = static_cast<T>(static_cast<double>(xr[t]) - mean[g + t]) * rstd[g + t];
        }
        MutRowMap<T>(py + off, n) = params.gamma[c] * hr + params.beta[c];
    });
    return res;
}

template <typename T>
void update_running_stats(std::span<T> running_mean, std::span<T> running_var, const NormCache<T>& cache,
                          T momentum) {
    if (cache.method != NormMethod::BN || cache.mode != Mode::Train) return;
    if (running_mean.size() != cache.batch_mean.size() || running_var.size() != cache.batch_var.size())
        throw std::invalid_argument("update_running_stats: channel count mismatch");
    for (std::size_t c = 0; c < running_mean.size(); ++c) {
        running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * cache.batch_mean[c];
        running_var[c] = (T(1) - momentum) * running_var[c] + momentum * cache.batch_var[c];
    }
}

template <typename T>
NormResult<T> normalize_forward(const Tensor4<T>& x, NormMethod method, NormState<T>& state, Mode mode) {
    auto res = normalize(x, method, state.view(), mode);
    update_running_stats<T>(state.running_mean, state.running_var, res.cache, state.momentum);
    return res;
}

template <typename T>
NormGrads<T> normalize_backward(const NormCache<T>& cache, const Tensor4<T>& dy) {
    const Tensor4<T>& xh = cache.x_hat;
    if (dy.dims() != xh.dims())
        throw std::invalid_argument("normalize_backward: dy " + dims_string(dy.dims()) +
                                    " does not match cached " + dims_string(xh.dims()));
    const std::size_t channels = xh.channels();
    const GroupIndex gi(cache.method, xh.dims());

    NormGrads<T> out;
    out.dx = Tensor4<T>(xh.dims());
    out.dgamma.assign(channels, T(0));
    out.dbeta.assign(channels, T(0));

    const T* pdy = dy.data();
    const T* ph = xh.data();
    T* pdx = out.dx.data();
    std::vector<double> dgamma(channels, 0.0), dbeta(channels, 0.0);
    std::vector<double> sum_g(gi.groups, 0.0), sum_gh(gi.groups, 0.0);
    const auto n = static_cast<Eigen::Index>(gi.row_length());
    const bool rows = gi.row_grouped();
    const T* rstd = cache.rstd.data();
    gi.for_each_row([&](std::size_t off, std::size_t g, std::size_t c) {
        const auto dyr = RowMap<T>(pdy + off, n).template cast<double>();
        const auto hr = RowMap<T>(ph + off, n).template cast<double>();
        const double gamma = static_cast<double>(cache.gamma[c]);
        const double s_dy = dyr.sum();
        const double s_dyh = (dyr * hr).sum();
        dgamma[c] += s_dyh;
        dbeta[c] += s_dy;
        if (rows) {
            sum_g[g] += gamma * s_dy;
            sum_gh[g] += gamma * s_dyh;
        } else {
            for (Eigen::Index t = 0; t < n; ++t) {
                const double gx = gamma * static_cast<double>(pdy[off + t]);
                sum_g[g + t] += gx;
                sum_gh[g + t] += gx * static_cast<double>(ph[off + t]);
            }
        }
    });
    for (std::size_t c = 0; c < channels; ++c) {
        out.dgamma[c] = static_cast<T>(dgamma[c]);
        out.dbeta[c] = static_cast<T>(dbeta[c]);
    }

    if (cache.method == NormMethod::BN && cache.mode == Mode::Infer) {
        // Running statistics are constants: one group per channel.
        gi.for_each_row([&](std::size_t off, std::size_t g, std::size_t c) {
            MutRowMap<T>(pdx + off, n) = RowMap<T>(pdy + off, n) * (cache.gamma[c] * rstd[g]);
        });
        return out;
    }

    const double inv_n = 1.0 / static_cast<double>(gi.count);
    gi.for_each_row([&](std::size_t off, std::size_t g, std::size_t c) {
        const double gamma = static_cast<double>(cache.gamma[c]);
        MutRowMap<T> dxr(pdx + off, n);
        if (rows) {
            const auto dyr = RowMap<T>(pdy + off, n).template cast<double>();
            const auto hr = RowMap<T>(ph + off, n).template cast<double>();
            dxr = (static_cast<double>(rstd[g]) * (gamma * dyr - sum_g[g] * inv_n - hr * (sum_gh[g] * inv_n)))
                      .template cast<T>();
        } else {
            for (Eigen::Index t = 0; t < n; ++t) {
                const double gx = gamma * static_cast<double>(pdy[off + t]);
                dxr[t] = static_cast<T>(static_cast<double>(rstd[g + t]) *
                                        (gx - sum_g[g + t] * inv_n - static_cast<double>(ph[off + t]) * sum_gh[g + t] * inv_n));
            }
        }
    });
    return out;
}

#define FDIAG_INSTANTIATE_NORM(T)                                                                       \
    template NormStats<T> norm_stats<T>(const Tensor4<T>&, NormMethod);                                 \
    template struct NormState<T>;                                                                       \
    template NormResult<T> normalize<T>(const Tensor4<T>&, NormMethod, const NormParamsView<T>&, Mode); \
    template NormResult<T> normalize_forward<T>(const Tensor4<T>&, NormMethod, NormState<T>&, Mode);    \
    template void update_running_stats<T>(std::span<T>, std::span<T>, const NormCache<T>&, T);          \
    template NormGrads<T> normalize_backward<T>(const NormCache<T>&, const Tensor4<T>&);

FDIAG_INSTANTIATE_NORM(float)
FDIAG_INSTANTIATE_NORM(double)

}  // namespace fdiag

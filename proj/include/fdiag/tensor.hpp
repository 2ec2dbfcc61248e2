#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace fdiag {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using MatrixMap = Eigen::Map<Matrix<T>>;

template <typename T>
using ConstMatrixMap = Eigen::Map<const Matrix<T>>;

// Storage for buffers read through Eigen maps. Vectorized reductions peel
// scalars up to the first aligned address, so a fixed base alignment keeps
// summation order, and therefore results, independent of the allocator.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

using Dims4 = std::array<std::size_t, 4>;

inline std::string dims_string(const Dims4& d) {
    return "(" + std::to_string(d[0]) + "," + std::to_string(d[1]) + "," + std::to_string(d[2]) +
           "," + std::to_string(d[3]) + ")";
}

// Dense rank-4 tensor in [batch, channel, frequency, time] order, time fastest.
template <typename T>
class Tensor4 {
public:
    Tensor4() = default;
    Tensor4(std::size_t b, std::size_t c, std::size_t f, std::size_t t, T fill = T(0))
        : dims_{b, c, f, t}, data_(b * c * f * t, fill) {}
    explicit Tensor4(const Dims4& d, T fill = T(0)) : Tensor4(d[0], d[1], d[2], d[3], fill) {}

    const Dims4& dims() const { return dims_; }
    std::size_t batch() const { return dims_[0]; }
    std::size_t channels() const { return dims_[1]; }
    std::size_t freq() const { return dims_[2]; }
    std::size_t time() const { return dims_[3]; }
    std::size_t size() const { return data_.size(); }
    std::size_t sample_size() const { return dims_[1] * dims_[2] * dims_[3]; }
    bool empty() const { return data_.empty(); }

    std::size_t offset(std::size_t b, std::size_t c, std::size_t f, std::size_t t) const {
        return ((b * dims_[1] + c) * dims_[2] + f) * dims_[3] + t;
    }
    T& operator()(std::size_t b, std::size_t c, std::size_t f, std::size_t t) {
        return data_[offset(b, c, f, t)];
    }
    const T& operator()(std::size_t b, std::size_t c, std::size_t f, std::size_t t) const {
        return data_[offset(b, c, f, t)];
    }

    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    std::span<T> sample(std::size_t b) {
        return std::span<T>(data_).subspan(b * sample_size(), sample_size());
    }
    std::span<const T> sample(std::size_t b) const {
        return std::span<const T>(data_).subspan(b * sample_size(), sample_size());
    }

    template <typename U>
    Tensor4<U> cast() const {
        Tensor4<U> out(dims_);
        for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
        return out;
    }

    friend bool operator==(const Tensor4&, const Tensor4&) = default;

private:
    Dims4 dims_{0, 0, 0, 0};
    AlignedVector<T> data_;
};

// Rows of x selected by batch index, in the order given.
template <typename T>
Tensor4<T> gather_batch(const Tensor4<T>& x, std::span<const std::size_t> rows) {
    Tensor4<T> out(rows.size(), x.channels(), x.freq(), x.time());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= x.batch()) throw std::out_of_range("gather_batch: row index out of range");
        auto src = x.sample(rows[i]);
        std::copy(src.begin(), src.end(), out.sample(i).begin());
    }
    return out;
}

// Stacks tensors along the batch axis. All parts must agree on (C, F, T).
template <typename T>
Tensor4<T> concat_batch(std::span<const Tensor4<T>* const> parts) {
    std::size_t total = 0;
    const Tensor4<T>* shape_ref = nullptr;
    for (const auto* p : parts) {
        if (shape_ref == nullptr && p->sample_size() > 0) shape_ref = p;
        total += p->batch();
    }
    if (shape_ref == nullptr) return parts.empty() ? Tensor4<T>() : Tensor4<T>(0, parts[0]->channels(), parts[0]->freq(), parts[0]->time());
    Tensor4<T> out(total, shape_ref->channels(), shape_ref->freq(), shape_ref->time());
    std::size_t row = 0;
    for (const auto* p : parts) {
        if (p->batch() == 0) continue;
        if (p->channels() != shape_ref->channels() || p->freq() != shape_ref->freq() ||
            p->time() != shape_ref->time())
            throw std::invalid_argument("concat_batch: mismatched sample shapes " +
                                        dims_string(p->dims()) + " vs " +
                                        dims_string(shape_ref->dims()));
        std::copy(p->values().begin(), p->values().end(), out.data() + row * out.sample_size());
        row += p->batch();
    }
    return out;
}

}  // namespace fdiag

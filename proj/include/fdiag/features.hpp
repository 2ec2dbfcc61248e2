#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>

#include "fdiag/signal_synth.hpp"
#include "fdiag/tensor.hpp"

namespace fdiag {

enum class WindowKind { Hann };

struct StftConfig {
    std::size_t n_fft = 512;
    std::size_t hop = 256;
    WindowKind window = WindowKind::Hann;

    void validate() const;
    std::size_t bins() const { return n_fft / 2 + 1; }
    std::size_t frames(std::size_t signal_length) const;
};

inline constexpr double kDefaultFloorEps = 1e-8;

// Periodic Hann window of length n.
std::vector<double> hann_window(std::size_t n);

// One-sided Hann-windowed DFT magnitudes, shape [bins x frames].
Matrix<double> stft(const Signal& signal, const StftConfig& cfg);

// Elementwise ln(spec + floor_eps).
Matrix<double> log_magnitude(const Matrix<double>& spec, double floor_eps = kDefaultFloorEps);

// Stacks log-magnitude STFTs into a [B, 1, F, T] tensor.
Tensor4<float> batch_features(std::span<const Signal> signals, const StftConfig& cfg,
                              double floor_eps = kDefaultFloorEps);

// Feature cache under <dataset>/features: log_stft.f32 plus features.json.
void save_feature_cache(const std::filesystem::path& dataset_dir, const Tensor4<float>& features,
                        const StftConfig& cfg, double floor_eps);
// Empty when no cache exists or it was computed with different settings.
std::optional<Tensor4<float>> load_feature_cache(const std::filesystem::path& dataset_dir,
                                                 const StftConfig& cfg, double floor_eps);

}  // namespace fdiag

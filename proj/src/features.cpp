#include "fdiag/features.hpp"

#include <cmath>
#include <complex>
#include <mutex>
#include <numbers>
#include <stdexcept>

#include <fftw3.h>
#include <json.hpp>

#include "fdiag/binary_io.hpp"

namespace fdiag {

namespace {

// FFTW planning is not thread-safe; execution on a private plan is.
std::mutex& planner_mutex() {
    static std::mutex m;
    return m;
}

class RealFft {
public:
    explicit RealFft(std::size_t n) : n_(n) {
        in_ = fftw_alloc_real(n);
        out_ = fftw_alloc_complex(n / 2 + 1);
        if (in_ == nullptr || out_ == nullptr) throw std::bad_alloc();
        std::lock_guard lock(planner_mutex());
        plan_ = fftw_plan_dft_r2c_1d(static_cast<int>(n), in_, out_, FFTW_ESTIMATE);
        if (plan_ == nullptr) throw std::runtime_error("fftw: planning failed");
    }
    ~RealFft() {
        {
            std::lock_guard lock(planner_mutex());
            fftw_destroy_plan(plan_);
        }
        fftw_free(in_);
        fftw_free(out_);
    }
    RealFft(const RealFft&) = delete;
    RealFft& operator=(const RealFft&) = delete;

    double* input() { return in_; }
    void execute() { fftw_execute(plan_); }
    double magnitude(std::size_t k) const { return std::hypot(out_[k][0], out_[k][1]); }

private:
    std::size_t n_;
    double* in_ = nullptr;
    fftw_complex* out_ = nullptr;
    fftw_plan plan_ = nullptr;
};

Matrix<double> stft_with(RealFft& fft, const std::vector<double>& window, std::span<const float> x,
                         const StftConfig& cfg) {
    const std::size_t frames = cfg.frames(x.size());
    Matrix<double> out(cfg.bins(), frames);
    for (std::size_t t = 0; t < frames; ++t) {
        const std::size_t begin = t * cfg.hop;
        double* in = fft.input();
        for (std::size_t n = 0; n < cfg.n_fft; ++n) in[n] = window[n] * static_cast<double>(x[begin + n]);
        fft.execute();
        for (std::size_t k = 0; k < cfg.bins(); ++k) out(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(t)) = fft.magnitude(k);
    }
    return out;
}

}  // namespace

void StftConfig::validate() const {
    if (n_fft == 0 || (n_fft & (n_fft - 1)) != 0)
        throw std::invalid_argument("stft: n_fft must be a power of two");
    if (hop == 0 || hop > n_fft) throw std::invalid_argument("stft: hop must lie in (0, n_fft]");
}

std::size_t StftConfig::frames(std::size_t signal_length) const {
    if (signal_length < n_fft) throw std::invalid_argument("stft: signal shorter than one frame");
    return (signal_length - n_fft) / hop + 1;
}

std::vector<double> hann_window(std::size_t n) {
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i)
        w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
    return w;
}

Matrix<double> stft(const Signal& signal, const StftConfig& cfg) {
    cfg.validate();
    cfg.frames(signal.samples.size());
    RealFft fft(cfg.n_fft);
    return stft_with(fft, hann_window(cfg.n_fft), signal.samples, cfg);
}

Matrix<double> log_magnitude(const Matrix<double>& spec, double floor_eps) {
    if (!(floor_eps > 0.0)) throw std::invalid_argument("log_magnitude: floor_eps must be positive");
    return (spec.array() + floor_eps).log().matrix();
}

Tensor4<float> batch_features(std::span<const Signal> signals, const StftConfig& cfg, double floor_eps) {
    cfg.validate();
    if (signals.empty()) return Tensor4<float>(0, 1, cfg.bins(), 0);
    const std::size_t length = signals[0].samples.size();
    for (const auto& s : signals) {
        if (s.samples.size() != length || s.sample_rate_hz != signals[0].sample_rate_hz)
            throw std::invalid_argument("batch_features: signals differ in length or sample rate");
    }
    const std::size_t frames = cfg.frames(length);
    Tensor4<float> out(signals.size(), 1, cfg.bins(), frames);
    RealFft fft(cfg.n_fft);
    const auto window = hann_window(cfg.n_fft);
    for (std::size_t b = 0; b < signals.size(); ++b) {
        const Matrix<double> logmag = log_magnitude(stft_with(fft, window, signals[b].samples, cfg), floor_eps);
        auto dst = out.sample(b);
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<float>(logmag.data()[i]);
    }
    return out;
}

void save_feature_cache(const std::filesystem::path& dataset_dir, const Tensor4<float>& features,
                        const StftConfig& cfg, double floor_eps) {
    const auto dir = dataset_dir / "features";
    std::filesystem::create_directories(dir);
    const auto& d = features.dims();
    nlohmann::ordered_json meta{{"n_fft", cfg.n_fft},
                                {"hop", cfg.hop},
                                {"window", "hann"},
                                {"floor_eps", floor_eps},
                                {"dims", {d[0], d[1], d[2], d[3]}},
                                {"layout", "BCFT float32 little-endian"}};
    write_f32_file(dir / "log_stft.f32", features.values());
    write_text_file(dir / "features.json", meta.dump(1) + "\n");
}

std::optional<Tensor4<float>> load_feature_cache(const std::filesystem::path& dataset_dir,
                                                 const StftConfig& cfg, double floor_eps) {
    const auto dir = dataset_dir / "features";
    if (!std::filesystem::exists(dir / "features.json") || !std::filesystem::exists(dir / "log_stft.f32"))
        return std::nullopt;
    const auto meta = nlohmann::json::parse(read_text_file(dir / "features.json"));
    if (meta.at("n_fft").get<std::size_t>() != cfg.n_fft || meta.at("hop").get<std::size_t>() != cfg.hop ||
        meta.at("floor_eps").get<double>() != floor_eps)
        return std::nullopt;
    const auto d = meta.at("dims").get<std::vector<std::size_t>>();
    if (d.size() != 4) return std::nullopt;
    Tensor4<float> out(d[0], d[1], d[2], d[3]);
    const auto raw = read_f32_file(dir / "log_stft.f32");
    if (raw.size() != out.size()) return std::nullopt;
    std::copy(raw.begin(), raw.end(), out.data());
    return out;
}

}  // namespace fdiag

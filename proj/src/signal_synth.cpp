#include "fdiag/signal_synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

namespace fdiag {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Bursts are truncated once the envelope has decayed below exp(-10).
constexpr double kBurstDecayLengths = 10.0;

void require(bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument(what);
}

double race_factor(const BearingGeometry& geom, double sign) {
    return 0.5 * geom.n_balls *
           (1.0 + sign * geom.ball_diameter_mm / geom.pitch_diameter_mm *
                      std::cos(geom.contact_angle_rad));
}

void add_bursts(std::vector<double>& out, std::span<const double> positions,
                std::span<const double> gains, const SynthConfig& cfg) {
    const double fs = cfg.sample_rate_hz;
    const double tau = cfg.resonance_decay_s;
    const auto tail = static_cast<std::size_t>(std::ceil(kBurstDecayLengths * tau * fs)) + 1;
    for (std::size_t e = 0; e < positions.size(); ++e) {
        const double onset = positions[e];
        const auto first = static_cast<std::size_t>(std::ceil(onset));
        const std::size_t last = std::min(out.size(), first + tail);
        for (std::size_t k = first; k < last; ++k) {
            const double dt = (static_cast<double>(k) - onset) / fs;
            out[k] += gains[e] * std::exp(-dt / tau) * std::sin(kTwoPi * cfg.resonance_hz * dt);
        }
    }
}

}  // namespace

void BearingGeometry::validate() const {
    require(n_balls >= 1, "bearing: n_balls must be >= 1");
    require(ball_diameter_mm > 0.0 && ball_diameter_mm < pitch_diameter_mm,
            "bearing: require 0 < ball_diameter_mm < pitch_diameter_mm");
    require(contact_angle_rad >= 0.0 && contact_angle_rad < std::numbers::pi / 2.0,
            "bearing: contact angle must lie in [0, pi/2)");
}

double bpfi(const BearingGeometry& geom, double fr_hz) { return race_factor(geom, +1.0) * fr_hz; }

// bpfi lies in [n*fr/2, n*fr], so the subtraction is exact and bpfi + bpfo == n*fr to the bit.
double bpfo(const BearingGeometry& geom, double fr_hz) {
    return static_cast<double>(geom.n_balls) * fr_hz - bpfi(geom, fr_hz);
}

void validate_profile(const RpmProfile& profile) {
    std::visit(
        [](const auto& p) {
            using P = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<P, SinusoidalRpm>) {
                require(p.period_s > 0.0, "sinusoidal rpm: period must be positive");
                require(p.amplitude_rpm >= 0.0, "sinusoidal rpm: amplitude must be non-negative");
                require(p.mean_rpm - p.amplitude_rpm > 0.0,
                        "sinusoidal rpm: mean_rpm - amplitude_rpm must be positive");
            } else if constexpr (std::is_same_v<P, TriangularRpm>) {
                require(p.period_s > 0.0, "triangular rpm: period must be positive");
                require(p.min_rpm > 0.0 && p.min_rpm < p.max_rpm,
                        "triangular rpm: require 0 < min_rpm < max_rpm");
            } else {
                require(p.rpm > 0.0, "constant rpm: rpm must be positive");
            }
        },
        profile);
}

double rpm_at(const RpmProfile& profile, double t) {
    return std::visit(
        [t](const auto& p) -> double {
            using P = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<P, SinusoidalRpm>) {
                return p.mean_rpm + p.amplitude_rpm * std::sin(kTwoPi * t / p.period_s + p.phase_rad);
            } else if constexpr (std::is_same_v<P, TriangularRpm>) {
                const double u = std::fmod(t, p.period_s) / p.period_s;
                const double rise = u < 0.5 ? 2.0 * u : 2.0 * (1.0 - u);
                return p.min_rpm + (p.max_rpm - p.min_rpm) * rise;
            } else {
                return p.rpm;
            }
        },
        profile);
}

double max_rpm(const RpmProfile& profile) {
    return std::visit(
        [](const auto& p) -> double {
            using P = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<P, SinusoidalRpm>) return p.mean_rpm + p.amplitude_rpm;
            else if constexpr (std::is_same_v<P, TriangularRpm>) return p.max_rpm;
            else return p.rpm;
        },
        profile);
}

double profile_period(const RpmProfile& profile) {
    return std::visit(
        [](const auto& p) -> double {
            using P = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<P, ConstantRpm>) return 0.0;
            else return p.period_s;
        },
        profile);
}

std::string profile_name(const RpmProfile& profile) {
    switch (profile.index()) {
        case 0: return "sinusoidal";
        case 1: return "triangular";
        default: return "constant";
    }
}

int FaultCondition::level(std::size_t fault) const {
    switch (fault) {
        case 0: return irf;
        case 1: return orf;
        case 2: return mis;
        case 3: return unb;
        default: throw std::out_of_range("FaultCondition: fault index out of range");
    }
}

int& FaultCondition::level(std::size_t fault) {
    switch (fault) {
        case 0: return irf;
        case 1: return orf;
        case 2: return mis;
        case 3: return unb;
        default: throw std::out_of_range("FaultCondition: fault index out of range");
    }
}

bool FaultCondition::valid() const {
    for (std::size_t f = 0; f < kNumFaults; ++f) {
        if (level(f) < 0 || level(f) >= kLevelCounts[f]) return false;
    }
    return true;
}

FaultMagnitudes fault_magnitudes(const FaultCondition& cond) {
    if (!cond.valid()) throw std::invalid_argument("fault_magnitudes: level out of range");
    static constexpr std::array<double, 2> race_mm{0.0, 0.2};
    static constexpr std::array<double, 3> misalignment_mm{0.0, 0.15, 0.3};
    static constexpr std::array<double, 3> unbalance_g{0.0, 10.034, 18.070};
    return {race_mm[cond.irf], race_mm[cond.orf], misalignment_mm[cond.mis],
            unbalance_g[cond.unb]};
}

void SynthConfig::validate() const {
    require(sample_rate_hz > 0.0, "synth: sample_rate_hz must be positive");
    require(duration_s > 0.0, "synth: duration_s must be positive");
    require(noise_std >= 0.0, "synth: noise_std must be non-negative");
    require(resonance_hz > 0.0 && resonance_hz < sample_rate_hz / 2.0,
            "synth: resonance_hz must lie in (0, sample_rate_hz/2)");
    require(resonance_decay_s > 0.0, "synth: resonance_decay_s must be positive");
    require(amplitudes.unbalance > 0.0 && amplitudes.misalignment > 0.0 && amplitudes.irf > 0.0 &&
                amplitudes.orf > 0.0,
            "synth: component amplitudes must be positive");
    require(misalignment_1x_ratio >= 0.0, "synth: misalignment_1x_ratio must be non-negative");
    if (torque_modulation) {
        require(torque_modulation->segment_s > 0.0, "synth: torque segment_s must be positive");
        require(torque_modulation->gain_min > 0.0 &&
                    torque_modulation->gain_min <= torque_modulation->gain_max,
                "synth: torque gain range must satisfy 0 < gain_min <= gain_max");
    }
    require(sample_count() >= 1, "synth: duration too short for sample rate");
}

std::size_t SynthConfig::sample_count() const {
    return static_cast<std::size_t>(std::llround(sample_rate_hz * duration_s));
}

std::vector<double> accumulate_cycles(const RpmProfile& profile, double start_s,
                                      double sample_rate_hz, std::size_t n, double order,
                                      double initial_cycles) {
    std::vector<double> cycles(n);
    double c = initial_cycles;
    for (std::size_t k = 0; k < n; ++k) {
        cycles[k] = c;
        const double t = start_s + static_cast<double>(k) / sample_rate_hz;
        c += order * rpm_at(profile, t) / 60.0 / sample_rate_hz;
    }
    return cycles;
}

std::vector<double> cycle_crossings(std::span<const double> cycles) {
    std::vector<double> out;
    for (std::size_t k = 1; k < cycles.size(); ++k) {
        const double prev = cycles[k - 1];
        const double cur = cycles[k];
        for (double edge = std::floor(prev) + 1.0; edge <= cur; edge += 1.0) {
            const double frac = (edge - prev) / (cur - prev);
            out.push_back(static_cast<double>(k - 1) + frac);
        }
    }
    return out;
}

Signal synthesize(const RpmProfile& profile, const FaultCondition& cond,
                  const BearingGeometry& geom, const SynthConfig& cfg, std::uint64_t seed) {
    validate_profile(profile);
    geom.validate();
    cfg.validate();
    if (!cond.valid()) throw std::invalid_argument("synthesize: fault level out of range");

    const double nyquist = cfg.sample_rate_hz / 2.0;
    const double fr_max = max_rpm(profile) / 60.0;
    if (std::max({2.0 * fr_max, bpfi(geom, fr_max), bpfo(geom, fr_max)}) >= nyquist)
        throw std::invalid_argument("synthesize: fault frequency at max rpm exceeds Nyquist");

    const double fs = cfg.sample_rate_hz;
    const std::size_t n = cfg.sample_count();

    // Draw order is part of the determinism contract.
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double start_s = cfg.random_start ? unit(rng) * profile_period(profile) : 0.0;
    const double shaft_offset = unit(rng);
    const double irf_offset = unit(rng);
    const double orf_offset = unit(rng);

    std::vector<double> machine(n, 0.0);
    const std::vector<double> shaft = accumulate_cycles(profile, start_s, fs, n, 1.0, shaft_offset);

    const double a_unb = cond.unb * cfg.amplitudes.unbalance;
    const double a_mis = cond.mis * cfg.amplitudes.misalignment;
    if (a_unb != 0.0 || a_mis != 0.0) {
        for (std::size_t k = 0; k < n; ++k) {
            const double phase = kTwoPi * shaft[k];
            machine[k] += a_unb * std::sin(phase) +
                          a_mis * (std::sin(2.0 * phase) +
                                   cfg.misalignment_1x_ratio * std::cos(phase));
        }
    }

    if (cond.irf > 0) {
        const auto cycles = accumulate_cycles(profile, start_s, fs, n, bpfi(geom, 1.0), irf_offset);
        const auto onsets = cycle_crossings(cycles);
        std::vector<double> gains(onsets.size());
        for (std::size_t e = 0; e < onsets.size(); ++e) {
            const auto k = std::min(n - 1, static_cast<std::size_t>(std::lround(onsets[e])));
            gains[e] = cond.irf * cfg.amplitudes.irf * 0.5 * (1.0 + std::cos(kTwoPi * shaft[k]));
        }
        add_bursts(machine, onsets, gains, cfg);
    }
    if (cond.orf > 0) {
        const auto cycles = accumulate_cycles(profile, start_s, fs, n, bpfo(geom, 1.0), orf_offset);
        const auto onsets = cycle_crossings(cycles);
        const std::vector<double> gains(onsets.size(), cond.orf * cfg.amplitudes.orf);
        add_bursts(machine, onsets, gains, cfg);
    }

    if (cfg.torque_modulation) {
        const auto& tm = *cfg.torque_modulation;
        std::uniform_real_distribution<double> gain_dist(tm.gain_min, tm.gain_max);
        const auto segment = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(tm.segment_s * fs)));
        for (std::size_t begin = 0; begin < n; begin += segment) {
            const double g = gain_dist(rng);
            for (std::size_t k = begin; k < std::min(n, begin + segment); ++k) machine[k] *= g;
        }
    }

    Signal out;
    out.sample_rate_hz = fs;
    out.samples.resize(n);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t k = 0; k < n; ++k) {
        const double eps = cfg.noise_std > 0.0 ? cfg.noise_std * noise(rng) : 0.0;
        out.samples[k] = static_cast<float>(machine[k] + eps);
    }
    return out;
}

}  // namespace fdiag

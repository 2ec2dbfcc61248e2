#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace fdiag {

// Deep-groove ball bearing geometry; defaults describe an NSK 6205.
struct BearingGeometry {
    int n_balls = 9;
    double ball_diameter_mm = 7.90;
    double pitch_diameter_mm = 38.5;
    double contact_angle_rad = 0.0;

    void validate() const;
};

// Ball pass frequencies of the inner and outer race. Both are linear in the
// shaft rotation frequency fr_hz and sum to n_balls * fr_hz.
double bpfi(const BearingGeometry& geom, double fr_hz);
double bpfo(const BearingGeometry& geom, double fr_hz);

struct SinusoidalRpm {
    double mean_rpm = 1200.0;
    double amplitude_rpm = 600.0;
    double period_s = 4.0;
    double phase_rad = 0.0;
};

// Symmetric triangle wave that starts at min_rpm and peaks at half period.
struct TriangularRpm {
    double min_rpm = 600.0;
    double max_rpm = 1800.0;
    double period_s = 4.0;
};

struct ConstantRpm {
    double rpm = 1800.0;
};

using RpmProfile = std::variant<SinusoidalRpm, TriangularRpm, ConstantRpm>;

void validate_profile(const RpmProfile& profile);
double rpm_at(const RpmProfile& profile, double t);
double max_rpm(const RpmProfile& profile);
// Repetition period of the profile, 0 for a constant profile.
double profile_period(const RpmProfile& profile);
std::string profile_name(const RpmProfile& profile);

inline constexpr std::size_t kNumFaults = 4;
inline constexpr std::array<int, kNumFaults> kLevelCounts{2, 2, 3, 3};
inline constexpr std::array<const char*, kNumFaults> kFaultNames{"IRF", "ORF", "MIS", "UNB"};
inline constexpr std::size_t kNumJointClasses = 36;

// Discrete severity levels of the four simultaneous fault types.
struct FaultCondition {
    int irf = 0;
    int orf = 0;
    int mis = 0;
    int unb = 0;

    int level(std::size_t fault) const;
    int& level(std::size_t fault);
    bool valid() const;
    bool is_normal() const { return irf == 0 && orf == 0 && mis == 0 && unb == 0; }

    friend bool operator==(const FaultCondition&, const FaultCondition&) = default;
};

struct FaultMagnitudes {
    double irf_mm;
    double orf_mm;
    double misalignment_mm;
    double unbalance_g;
};

FaultMagnitudes fault_magnitudes(const FaultCondition& cond);

struct TorqueModulation {
    double segment_s = 0.25;
    double gain_min = 0.7;
    double gain_max = 1.3;
};

// Base amplitude per severity level index; component amplitude = level * base.
struct ComponentAmplitudes {
    double unbalance = 0.5;
    double misalignment = 0.5;
    double irf = 1.0;
    double orf = 0.6;
};

struct SynthConfig {
    double sample_rate_hz = 8192.0;
    double duration_s = 1.0;
    double noise_std = 0.05;
    double resonance_hz = 2000.0;
    double resonance_decay_s = 0.002;
    ComponentAmplitudes amplitudes;
    // Relative amplitude of the 1x harmonic that accompanies the 2x misalignment tone.
    double misalignment_1x_ratio = 0.3;
    std::optional<TorqueModulation> torque_modulation;
    // Start each record at a random point of the rpm profile's period.
    bool random_start = true;

    void validate() const;
    std::size_t sample_count() const;
};

struct Signal {
    std::vector<float> samples;
    double sample_rate_hz = 0.0;
};

// Running cycle count of a tone at `order` times the shaft frequency,
// sampled at n points starting at start_s; cycles[0] = initial_cycles.
std::vector<double> accumulate_cycles(const RpmProfile& profile, double start_s,
                                      double sample_rate_hz, std::size_t n, double order,
                                      double initial_cycles = 0.0);

// Fractional sample positions where the cycle count crosses an integer.
std::vector<double> cycle_crossings(std::span<const double> cycles);

// Deterministic in every argument including seed.
Signal synthesize(const RpmProfile& profile, const FaultCondition& cond,
                  const BearingGeometry& geom, const SynthConfig& cfg, std::uint64_t seed);

}  // namespace fdiag

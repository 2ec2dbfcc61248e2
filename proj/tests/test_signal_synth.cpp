#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <set>

#include "fdiag/binary_io.hpp"
#include "fdiag/dataset.hpp"
#include "fdiag/features.hpp"
#include "fdiag/labels.hpp"
#include "fdiag/signal_synth.hpp"
#include "oracles.hpp"

using namespace fdiag;

namespace {

SynthConfig quiet() {
    SynthConfig cfg;
    cfg.noise_std = 0.0;
    return cfg;
}

std::vector<double> as_double(const Signal& s) { return {s.samples.begin(), s.samples.end()}; }

std::size_t argmax(const std::vector<double>& v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

TEST_SUITE("signal_synth") {

TEST_CASE("ball pass frequencies for the 6205 geometry") {
    const BearingGeometry g;
    // Hand evaluation: (n/2)(1 +- d/D), theta = 0.
    const double ratio = 7.90 / 38.5;
    CHECK(bpfi(g, 1.0) == doctest::Approx(4.5 * (1.0 + ratio)).epsilon(1e-12));
    CHECK(bpfo(g, 1.0) == doctest::Approx(4.5 * (1.0 - ratio)).epsilon(1e-12));
    // Tabulated values are rounded to six digits.
    CHECK(std::abs(bpfi(g, 1.0) - 5.42338) < 5e-6);
    CHECK(std::abs(bpfo(g, 1.0) - 3.57662) < 5e-6);
    CHECK(bpfi(g, 0.0) == 0.0);
    CHECK(bpfo(g, 0.0) == 0.0);
}

TEST_CASE("perpendicular contact angle splits the balls evenly") {
    BearingGeometry g;
    g.contact_angle_rad = oracle::kPi / 2;
    CHECK(bpfi(g, 10.0) == doctest::Approx(45.0).epsilon(1e-12));
    CHECK(bpfo(g, 10.0) == doctest::Approx(45.0).epsilon(1e-12));
}

TEST_CASE("outer race frequency vanishes as the ball fills the pitch circle") {
    BearingGeometry g;
    g.ball_diameter_mm = g.pitch_diameter_mm * (1.0 - 1e-12);
    CHECK(std::abs(bpfo(g, 10.0)) < 1e-9);
}

TEST_CASE("ball pass frequency properties") {
    oracle::Gen gen(11);
    for (int trial = 0; trial < 500; ++trial) {
        BearingGeometry g;
        g.n_balls = gen.integer(3, 20);
        g.pitch_diameter_mm = gen.uniform(10.0, 100.0);
        g.ball_diameter_mm = gen.uniform(0.05, 0.45) * g.pitch_diameter_mm;
        g.contact_angle_rad = gen.uniform(0.0, 1.4);
        const double f = gen.uniform(0.1, 60.0);
        const double a = gen.uniform(0.0, 5.0);
        const double sum = bpfi(g, f) + bpfo(g, f);
        const double expect = g.n_balls * f;
        CHECK(sum == expect);
        CHECK(bpfi(g, a * f) == doctest::Approx(a * bpfi(g, f)).epsilon(1e-12));
        CHECK(bpfo(g, a * f) == doctest::Approx(a * bpfo(g, f)).epsilon(1e-12));
        CHECK(bpfi(g, f) > bpfo(g, f));
    }
}

TEST_CASE("invalid geometry is rejected") {
    BearingGeometry g;
    g.ball_diameter_mm = g.pitch_diameter_mm;
    CHECK_THROWS_AS(g.validate(), std::invalid_argument);
    g = BearingGeometry{};
    g.n_balls = 0;
    CHECK_THROWS_AS(g.validate(), std::invalid_argument);
}

TEST_CASE("rpm profiles") {
    CHECK(rpm_at(ConstantRpm{1800}, 2.37) == 1800.0);
    CHECK(rpm_at(SinusoidalRpm{1200, 600, 4, 0}, 0.0) == doctest::Approx(1200.0));
    CHECK(rpm_at(SinusoidalRpm{1200, 600, 4, 0}, 1.0) == doctest::Approx(1800.0));
    const TriangularRpm tri{600, 1800, 4};
    CHECK(rpm_at(tri, 0.0) == doctest::Approx(600.0));
    CHECK(rpm_at(tri, 1.0) == doctest::Approx(1200.0));
    CHECK(rpm_at(tri, 2.0) == doctest::Approx(1800.0));
    CHECK(rpm_at(tri, 3.0) == doctest::Approx(1200.0));
    CHECK(rpm_at(tri, 4.0) == doctest::Approx(600.0));
    CHECK(rpm_at(tri, 6.0) == doctest::Approx(1800.0));
    CHECK(max_rpm(tri) == 1800.0);
    CHECK(max_rpm(SinusoidalRpm{1200, 600, 4, 0}) == 1800.0);
}

TEST_CASE("zero condition without noise is silent") {
    const Signal s = synthesize(ConstantRpm{1800}, FaultCondition{}, BearingGeometry{}, quiet(), 7);
    CHECK(s.samples.size() == 8192);
    for (float v : s.samples) REQUIRE(v == 0.0f);
}

TEST_CASE("unbalance alone is a tone at the shaft frequency") {
    const Signal s = synthesize(ConstantRpm{1800}, FaultCondition{0, 0, 0, 2}, BearingGeometry{}, quiet(), 3);
    // One second at 8192 Hz: DFT bins are 1 Hz apart.
    const auto mags = oracle::dft_bins(as_double(s), 0, 200);
    CHECK(argmax(mags) == 30);
    // Spectral peak of the STFT, as a feature extractor sees it.
    const StftConfig cfg{256, 128};
    const Matrix<double> spec = stft(s, cfg);
    const double bin_hz = 8192.0 / 256.0;
    for (Eigen::Index t = 0; t < spec.cols(); ++t) {
        Eigen::Index k = 0;
        spec.col(t).maxCoeff(&k);
        CHECK(std::abs(static_cast<double>(k) * bin_hz - 30.0) <= bin_hz);
    }
}

TEST_CASE("single-fault spectral peaks match the analytic frequency") {
    const BearingGeometry g;
    for (double rpm : {900.0, 1200.0, 1500.0, 1800.0}) {
        const double fr = rpm / 60.0;
        // Misalignment at 2x with its weak 1x partner.
        const Signal mis = synthesize(ConstantRpm{rpm}, FaultCondition{0, 0, 2, 0}, g, quiet(), 5);
        const auto m = oracle::dft_bins(as_double(mis), 0, 200);
        CHECK(std::abs(static_cast<double>(argmax(m)) - 2.0 * fr) <= 1.0);
        // Outer race bursts: energy envelope peaks at the pass frequency.
        const Signal orf = synthesize(ConstantRpm{rpm}, FaultCondition{0, 1, 0, 0}, g, quiet(), 5);
        std::vector<double> env(orf.samples.size());
        for (std::size_t i = 0; i < env.size(); ++i) env[i] = double(orf.samples[i]) * orf.samples[i];
        const auto lo = static_cast<std::size_t>(0.6 * bpfo(g, fr));
        const auto e = oracle::dft_bins(env, lo, 2 * lo);
        CHECK(std::abs(static_cast<double>(lo + argmax(e)) - bpfo(g, fr)) <= 1.0);
    }
}

TEST_CASE("inner race impulse rate at 1800 rpm") {
    const BearingGeometry g;
    const double rate = bpfi(g, 30.0);
    CHECK(rate == doctest::Approx(162.70).epsilon(1e-4));
    // The shaft modulation makes some bursts vanish, so count through the
    // envelope spectrum rather than thresholding.
    const Signal s = synthesize(ConstantRpm{1800}, FaultCondition{1, 0, 0, 0}, g, quiet(), 9);
    std::vector<double> env(s.samples.size());
    for (std::size_t i = 0; i < env.size(); ++i) env[i] = double(s.samples[i]) * s.samples[i];
    const auto e = oracle::dft_bins(env, 140, 190);
    CHECK(std::abs(140.0 + static_cast<double>(argmax(e)) - rate) <= 1.0);
}

TEST_CASE("outer race bursts counted by envelope threshold") {
    const BearingGeometry g;
    const Signal s = synthesize(ConstantRpm{1800}, FaultCondition{0, 1, 0, 0}, g, quiet(), 21);
    double peak = 0.0;
    for (float v : s.samples) peak = std::max(peak, std::abs(double(v)));
    const std::size_t refractory = 8192 * 3 / 1000;
    std::size_t count = 0, last = 0;
    bool seen = false;
    for (std::size_t i = 0; i < s.samples.size(); ++i) {
        if (std::abs(double(s.samples[i])) > 0.5 * peak && (!seen || i - last > refractory)) {
            ++count;
            last = i;
            seen = true;
        }
    }
    CHECK(std::abs(static_cast<double>(count) - bpfo(g, 30.0)) <= 1.0);
}

TEST_CASE("phase accumulator impulse count") {
    oracle::Gen gen(4);
    const BearingGeometry g;
    for (int trial = 0; trial < 50; ++trial) {
        const double rpm = gen.uniform(300.0, 1800.0);
        const double duration = gen.uniform(0.5, 2.0);
        const double fs = 8192.0;
        const auto n = static_cast<std::size_t>(duration * fs);
        for (double order : {bpfi(g, 1.0), bpfo(g, 1.0)}) {
            const auto cycles = accumulate_cycles(ConstantRpm{rpm}, 0.0, fs, n, order, gen.uniform(0.0, 1.0));
            const double expect = std::floor(static_cast<double>(n) / fs * order * rpm / 60.0);
            CHECK(std::abs(static_cast<double>(cycle_crossings(cycles).size()) - expect) <= 1.0);
        }
    }
}

TEST_CASE("synthesize is pure in its inputs") {
    SynthConfig cfg;
    cfg.torque_modulation = TorqueModulation{};
    const FaultCondition c{1, 1, 2, 1};
    const auto a = synthesize(SinusoidalRpm{}, c, BearingGeometry{}, cfg, 99);
    const auto b = synthesize(SinusoidalRpm{}, c, BearingGeometry{}, cfg, 99);
    CHECK(a.samples == b.samples);
    const auto other = synthesize(SinusoidalRpm{}, c, BearingGeometry{}, cfg, 100);
    CHECK(a.samples != other.samples);
}

TEST_CASE("fault tones above Nyquist are rejected") {
    SynthConfig cfg;
    cfg.sample_rate_hz = 256.0;
    CHECK_THROWS_AS(synthesize(ConstantRpm{1800}, FaultCondition{}, BearingGeometry{}, cfg, 0), std::invalid_argument);
}

TEST_CASE("fault levels out of range are rejected") {
    CHECK_THROWS_AS(synthesize(ConstantRpm{}, FaultCondition{2, 0, 0, 0}, BearingGeometry{}, SynthConfig{}, 0),
                    std::invalid_argument);
    CHECK_THROWS_AS(joint_from_levels(FaultCondition{0, 0, 3, 0}), std::invalid_argument);
    CHECK_THROWS_AS(levels_from_joint(36), std::invalid_argument);
    CHECK_THROWS_AS(levels_from_joint(-1), std::invalid_argument);
}

TEST_CASE("joint class encoding") {
    CHECK(joint_from_levels(FaultCondition{0, 0, 0, 0}) == 0);
    CHECK(joint_from_levels(FaultCondition{1, 1, 2, 2}) == 35);
    // Enumeration in nested-loop order visits 0..35 in sequence.
    int expect = 0;
    for (int irf = 0; irf < 2; ++irf)
        for (int orf = 0; orf < 2; ++orf)
            for (int mis = 0; mis < 3; ++mis)
                for (int unb = 0; unb < 3; ++unb) {
                    const FaultCondition c{irf, orf, mis, unb};
                    CHECK(joint_from_levels(c) == expect);
                    CHECK(levels_from_joint(expect) == c);
                    ++expect;
                }
    CHECK(expect == 36);
    CHECK(all_conditions().size() == 36);
}

TEST_CASE("fault magnitudes follow the severity ladder") {
    const auto m = fault_magnitudes(FaultCondition{1, 1, 2, 1});
    CHECK(m.misalignment_mm == doctest::Approx(0.3));
    CHECK(fault_magnitudes(FaultCondition{}).misalignment_mm == 0.0);
}

}  // TEST_SUITE

TEST_SUITE("dataset") {

namespace {
SynthConfig short_cfg() {
    SynthConfig cfg;
    cfg.duration_s = 0.125;
    return cfg;
}
}  // namespace

TEST_CASE("desk-scale counts") {
    const auto ds = make_domain_dataset(Subset::C, SampleCounts{100, 10}, 1.0, short_cfg(), 1);
    CHECK(ds.size() == 100 + 35 * 10);
    CHECK(ds.labeled_indices().size() == 450);
    std::vector<int> per_class(36, 0);
    for (const auto& r : ds.records) ++per_class[joint_from_levels(r.cond)];
    CHECK(per_class[0] == 100);
    for (int j = 1; j < 36; ++j) CHECK(per_class[j] == 10);
}

TEST_CASE("labeled share is rounded up per condition") {
    const auto ds = make_domain_dataset(Subset::B, SampleCounts{100, 10}, 0.1, short_cfg(), 1);
    std::vector<int> labeled(36, 0);
    for (const auto& r : ds.records) labeled[joint_from_levels(r.cond)] += r.labeled ? 1 : 0;
    CHECK(labeled[0] == 10);
    for (int j = 1; j < 36; ++j) CHECK(labeled[j] == 1);
    CHECK(labeled_count(10, 0.01) == 1);
    CHECK(labeled_count(7, 0.5) == 4);
}

TEST_CASE("same seed gives bit-identical datasets") {
    const auto a = make_domain_dataset(Subset::A, SampleCounts{4, 1}, 0.5, short_cfg(), 5);
    const auto b = make_domain_dataset(Subset::A, SampleCounts{4, 1}, 0.5, short_cfg(), 5);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a.signals[i].samples == b.signals[i].samples);
        CHECK(a.records[i].seed == b.records[i].seed);
        CHECK(a.records[i].labeled == b.records[i].labeled);
    }
    const auto c = make_domain_dataset(Subset::A, SampleCounts{4, 1}, 0.5, short_cfg(), 6);
    CHECK(a.signals[0].samples != c.signals[0].samples);
}

TEST_CASE("per-sample seeds differ across conditions and samples") {
    std::set<std::uint64_t> seen;
    for (std::size_t c = 0; c < 36; ++c)
        for (std::size_t s = 0; s < 20; ++s) seen.insert(sample_seed(3, c, s));
    CHECK(seen.size() == 36 * 20);
}

TEST_CASE("bad dataset arguments") {
    CHECK_THROWS_AS(make_domain_dataset(Subset::C, SampleCounts{0, 10}, 0.1, short_cfg(), 0), std::invalid_argument);
    CHECK_THROWS_AS(make_domain_dataset(Subset::C, SampleCounts{10, 0}, 0.1, short_cfg(), 0), std::invalid_argument);
    CHECK_THROWS_AS(make_domain_dataset(Subset::C, SampleCounts{10, 1}, 0.0, short_cfg(), 0), std::invalid_argument);
    CHECK_THROWS_AS(make_domain_dataset(Subset::C, SampleCounts{10, 1}, 1.5, short_cfg(), 0), std::invalid_argument);
}

TEST_CASE("dataset files round-trip") {
    const auto dir = std::filesystem::temp_directory_path() / "fdiag_test_dataset";
    std::filesystem::remove_all(dir);
    const auto a = make_domain_dataset(Subset::A, SampleCounts{3, 1}, 0.5, short_cfg(), 8);
    save_dataset(a, dir);
    const auto b = load_dataset(dir);
    REQUIRE(b.size() == a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a.signals[i].samples == b.signals[i].samples);
        CHECK(a.records[i].cond == b.records[i].cond);
        CHECK(a.records[i].labeled == b.records[i].labeled);
        CHECK(a.records[i].split == b.records[i].split);
    }
    CHECK(b.spec.torque_modulation.has_value());
    std::filesystem::remove_all(dir);
    CHECK_THROWS_AS(load_dataset(dir), MissingInput);
}

}  // TEST_SUITE

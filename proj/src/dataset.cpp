#include "fdiag/dataset.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "fdiag/binary_io.hpp"
#include "fdiag/labels.hpp"

namespace fdiag {

using nlohmann::json;
using nlohmann::ordered_json;

char subset_letter(Subset s) {
    switch (s) {
        case Subset::A: return 'A';
        case Subset::B: return 'B';
        case Subset::C: return 'C';
    }
    return '?';
}

Subset parse_subset(const std::string& s) {
    if (s == "A" || s == "a") return Subset::A;
    if (s == "B" || s == "b") return Subset::B;
    if (s == "C" || s == "c") return Subset::C;
    throw std::invalid_argument("unknown subset '" + s + "' (expected A, B or C)");
}

SubsetSpec default_subset_spec(Subset s) {
    SubsetSpec spec;
    spec.subset = s;
    switch (s) {
        case Subset::A:
            spec.profile = SinusoidalRpm{1200.0, 600.0, 4.0, 0.0};
            spec.torque_modulation = TorqueModulation{0.25, 0.7, 1.3};
            break;
        case Subset::B: spec.profile = TriangularRpm{600.0, 1800.0, 4.0}; break;
        case Subset::C: spec.profile = ConstantRpm{1800.0}; break;
    }
    return spec;
}

std::vector<std::size_t> DomainDataset::labeled_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records.size(); ++i)
        if (records[i].labeled) out.push_back(i);
    return out;
}

std::vector<std::size_t> DomainDataset::unlabeled_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records.size(); ++i)
        if (!records[i].labeled) out.push_back(i);
    return out;
}

std::vector<FaultCondition> DomainDataset::conditions() const {
    std::vector<FaultCondition> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(r.cond);
    return out;
}

std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t sample_seed(std::uint64_t master, std::size_t condition_index, std::size_t sample_index) {
    std::uint64_t h = mix64(master);
    h = mix64(h ^ (static_cast<std::uint64_t>(condition_index) + 1));
    return mix64(h ^ (static_cast<std::uint64_t>(sample_index) + 1));
}

std::size_t labeled_count(std::size_t n, double labeled_fraction) {
    // The small slack keeps e.g. 0.1 * 10 from rounding up to 2.
    const double raw = std::ceil(labeled_fraction * static_cast<double>(n) - 1e-9);
    return std::min(n, std::max<std::size_t>(1, static_cast<std::size_t>(raw)));
}

DomainDataset make_domain_dataset(const SubsetSpec& spec, SampleCounts counts, double labeled_fraction,
                                  const SynthConfig& cfg, std::uint64_t seed,
                                  const BearingGeometry& geometry) {
    if (counts.normal_n == 0 || counts.fault_n == 0)
        throw std::invalid_argument("make_domain_dataset: sample counts must be positive");
    if (!(labeled_fraction > 0.0 && labeled_fraction <= 1.0))
        throw std::invalid_argument("make_domain_dataset: labeled_fraction must lie in (0, 1]");

    DomainDataset ds;
    ds.spec = spec;
    ds.geometry = geometry;
    ds.synth = cfg;
    ds.synth.torque_modulation = spec.torque_modulation;
    ds.synth.validate();
    validate_profile(spec.profile);
    geometry.validate();

    const auto conditions = all_conditions();
    for (std::size_t c = 0; c < conditions.size(); ++c) {
        const std::size_t n = c == 0 ? counts.normal_n : counts.fault_n;
        const std::size_t n_labeled = labeled_count(n, labeled_fraction);
        for (std::size_t i = 0; i < n; ++i) {
            SampleRecord rec;
            rec.cond = conditions[c];
            rec.condition_index = c;
            rec.sample_index = i;
            rec.seed = sample_seed(seed, c, i);
            rec.labeled = i < n_labeled;
            rec.split = rec.labeled ? "train" : "test";
            char name[48];
            std::snprintf(name, sizeof name, "c%02zu_s%04zu.f32", c, i);
            rec.file = name;
            ds.records.push_back(std::move(rec));
        }
    }
    ds.signals.reserve(ds.records.size());
    for (const auto& rec : ds.records)
        ds.signals.push_back(synthesize(spec.profile, rec.cond, geometry, ds.synth, rec.seed));
    return ds;
}

ordered_json profile_to_json(const RpmProfile& profile) {
    return std::visit(
        [](const auto& p) -> ordered_json {
            using P = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<P, SinusoidalRpm>)
                return {{"type", "sinusoidal"},
                        {"mean_rpm", p.mean_rpm},
                        {"amplitude_rpm", p.amplitude_rpm},
                        {"period_s", p.period_s},
                        {"phase_rad", p.phase_rad}};
            else if constexpr (std::is_same_v<P, TriangularRpm>)
                return {{"type", "triangular"},
                        {"min_rpm", p.min_rpm},
                        {"max_rpm", p.max_rpm},
                        {"period_s", p.period_s}};
            else
                return {{"type", "constant"}, {"rpm", p.rpm}};
        },
        profile);
}

RpmProfile profile_from_json(const json& j) {
    const std::string type = j.at("type").get<std::string>();
    if (type == "sinusoidal")
        return SinusoidalRpm{j.at("mean_rpm").get<double>(), j.at("amplitude_rpm").get<double>(),
                             j.at("period_s").get<double>(), j.value("phase_rad", 0.0)};
    if (type == "triangular")
        return TriangularRpm{j.at("min_rpm").get<double>(), j.at("max_rpm").get<double>(),
                             j.at("period_s").get<double>()};
    if (type == "constant") return ConstantRpm{j.at("rpm").get<double>()};
    throw std::invalid_argument("unknown rpm profile type '" + type + "'");
}

ordered_json synth_config_to_json(const SynthConfig& cfg) {
    ordered_json j{{"sample_rate_hz", cfg.sample_rate_hz},
                   {"duration_s", cfg.duration_s},
                   {"noise_std", cfg.noise_std},
                   {"resonance_hz", cfg.resonance_hz},
                   {"resonance_decay_s", cfg.resonance_decay_s},
                   {"amplitudes",
                    {{"unbalance", cfg.amplitudes.unbalance},
                     {"misalignment", cfg.amplitudes.misalignment},
                     {"irf", cfg.amplitudes.irf},
                     {"orf", cfg.amplitudes.orf}}},
                   {"misalignment_1x_ratio", cfg.misalignment_1x_ratio},
                   {"random_start", cfg.random_start}};
    if (cfg.torque_modulation)
        j["torque_modulation"] = {{"segment_s", cfg.torque_modulation->segment_s},
                                  {"gain_min", cfg.torque_modulation->gain_min},
                                  {"gain_max", cfg.torque_modulation->gain_max}};
    else
        j["torque_modulation"] = nullptr;
    return j;
}

namespace {

SynthConfig synth_config_from_json(const json& j) {
    SynthConfig cfg;
    cfg.sample_rate_hz = j.at("sample_rate_hz").get<double>();
    cfg.duration_s = j.at("duration_s").get<double>();
    cfg.noise_std = j.at("noise_std").get<double>();
    cfg.resonance_hz = j.at("resonance_hz").get<double>();
    cfg.resonance_decay_s = j.at("resonance_decay_s").get<double>();
    const auto& a = j.at("amplitudes");
    cfg.amplitudes = {a.at("unbalance").get<double>(), a.at("misalignment").get<double>(),
                      a.at("irf").get<double>(), a.at("orf").get<double>()};
    cfg.misalignment_1x_ratio = j.at("misalignment_1x_ratio").get<double>();
    cfg.random_start = j.at("random_start").get<bool>();
    if (const auto& tm = j.at("torque_modulation"); !tm.is_null())
        cfg.torque_modulation = TorqueModulation{tm.at("segment_s").get<double>(),
                                                 tm.at("gain_min").get<double>(),
                                                 tm.at("gain_max").get<double>()};
    return cfg;
}

}  // namespace

ordered_json geometry_to_json(const BearingGeometry& geom) {
    return {{"n_balls", geom.n_balls},
            {"ball_diameter_mm", geom.ball_diameter_mm},
            {"pitch_diameter_mm", geom.pitch_diameter_mm},
            {"contact_angle_rad", geom.contact_angle_rad}};
}

void save_dataset(const DomainDataset& ds, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (ds.signals.size() != ds.records.size())
        throw std::invalid_argument("save_dataset: signal/record count mismatch");
    fs::create_directories(dir / "signals");

    ordered_json records = ordered_json::array();
    for (std::size_t i = 0; i < ds.records.size(); ++i) {
        const auto& r = ds.records[i];
        records.push_back({{"file", r.file},
                           {"levels", {r.cond.irf, r.cond.orf, r.cond.mis, r.cond.unb}},
                           {"condition_index", r.condition_index},
                           {"sample_index", r.sample_index},
                           {"seed", r.seed},
                           {"labeled", r.labeled},
                           {"split", r.split}});
        write_f32_file(dir / "signals" / r.file, ds.signals[i].samples);
    }
    ordered_json manifest{{"format", "fdiag-dataset/1"},
                          {"subset", std::string(1, subset_letter(ds.spec.subset))},
                          {"profile", profile_to_json(ds.spec.profile)},
                          {"geometry", geometry_to_json(ds.geometry)},
                          {"synth", synth_config_to_json(ds.synth)},
                          {"sample_count", ds.synth.sample_count()},
                          {"records", std::move(records)}};
    write_text_file(dir / "manifest.json", manifest.dump(1) + "\n");
}

DomainDataset load_dataset(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    if (!std::filesystem::exists(manifest_path))
        throw MissingInput("dataset manifest not found: " + manifest_path.string());
    const json m = json::parse(read_text_file(manifest_path));

    DomainDataset ds;
    ds.spec.subset = parse_subset(m.at("subset").get<std::string>());
    ds.spec.profile = profile_from_json(m.at("profile"));
    const auto& g = m.at("geometry");
    ds.geometry = {g.at("n_balls").get<int>(), g.at("ball_diameter_mm").get<double>(),
                   g.at("pitch_diameter_mm").get<double>(), g.at("contact_angle_rad").get<double>()};
    ds.synth = synth_config_from_json(m.at("synth"));
    ds.spec.torque_modulation = ds.synth.torque_modulation;
    const auto expected = m.at("sample_count").get<std::size_t>();

    for (const auto& r : m.at("records")) {
        SampleRecord rec;
        rec.file = r.at("file").get<std::string>();
        const auto levels = r.at("levels").get<std::vector<int>>();
        if (levels.size() != kNumFaults) throw std::runtime_error("manifest: bad levels in " + rec.file);
        rec.cond = {levels[0], levels[1], levels[2], levels[3]};
        if (!rec.cond.valid()) throw std::runtime_error("manifest: level out of range in " + rec.file);
        rec.condition_index = r.at("condition_index").get<std::size_t>();
        rec.sample_index = r.at("sample_index").get<std::size_t>();
        rec.seed = r.at("seed").get<std::uint64_t>();
        rec.labeled = r.at("labeled").get<bool>();
        rec.split = r.at("split").get<std::string>();

        Signal sig;
        sig.sample_rate_hz = ds.synth.sample_rate_hz;
        sig.samples = read_f32_file(dir / "signals" / rec.file);
        if (sig.samples.size() != expected)
            throw std::runtime_error("dataset: wrong sample count in " + rec.file);
        ds.records.push_back(std::move(rec));
        ds.signals.push_back(std::move(sig));
    }
    return ds;
}

}  // namespace fdiag

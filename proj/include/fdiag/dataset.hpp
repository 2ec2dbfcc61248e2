#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fdiag/signal_synth.hpp"

namespace fdiag {

enum class Subset { A, B, C };

char subset_letter(Subset s);
Subset parse_subset(const std::string& s);
inline constexpr std::array<Subset, 3> kAllSubsets{Subset::A, Subset::B, Subset::C};

// Operating condition of one subset: rpm profile plus optional torque modulation.
struct SubsetSpec {
    Subset subset = Subset::C;
    RpmProfile profile = ConstantRpm{};
    std::optional<TorqueModulation> torque_modulation;
};

// A: sinusoidal rpm with torque modulation; B: triangular rpm; C: constant rpm, no load.
SubsetSpec default_subset_spec(Subset s);

struct SampleCounts {
    std::size_t normal_n = 100;
    std::size_t fault_n = 10;
};

struct SampleRecord {
    FaultCondition cond;
    std::size_t condition_index = 0;
    std::size_t sample_index = 0;
    std::uint64_t seed = 0;
    bool labeled = false;
    // "train" for the labeled pool, "test" for the unlabeled pool.
    std::string split;
    std::string file;
};

struct DomainDataset {
    SubsetSpec spec;
    BearingGeometry geometry;
    SynthConfig synth;
    std::vector<SampleRecord> records;
    std::vector<Signal> signals;

    std::size_t size() const { return records.size(); }
    std::vector<std::size_t> labeled_indices() const;
    std::vector<std::size_t> unlabeled_indices() const;
    std::vector<FaultCondition> conditions() const;
};

// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

// Per-sample seed: mix64(mix64(mix64(master) ^ (condition + 1)) ^ (sample + 1)).
std::uint64_t sample_seed(std::uint64_t master, std::size_t condition_index, std::size_t sample_index);

// Number of labeled samples for a condition with n samples: max(1, ceil(fraction * n)).
std::size_t labeled_count(std::size_t n, double labeled_fraction);

DomainDataset make_domain_dataset(const SubsetSpec& spec, SampleCounts counts, double labeled_fraction,
                                  const SynthConfig& cfg, std::uint64_t seed,
                                  const BearingGeometry& geometry = {});

inline DomainDataset make_domain_dataset(Subset subset, SampleCounts counts, double labeled_fraction,
                                         const SynthConfig& cfg, std::uint64_t seed) {
    return make_domain_dataset(default_subset_spec(subset), counts, labeled_fraction, cfg, seed);
}

nlohmann::ordered_json profile_to_json(const RpmProfile& profile);
RpmProfile profile_from_json(const nlohmann::json& j);
nlohmann::ordered_json synth_config_to_json(const SynthConfig& cfg);
nlohmann::ordered_json geometry_to_json(const BearingGeometry& geom);

// Directory layout: manifest.json plus signals/<file> raw float32 LE per record.
void save_dataset(const DomainDataset& ds, const std::filesystem::path& dir);
DomainDataset load_dataset(const std::filesystem::path& dir);

}  // namespace fdiag

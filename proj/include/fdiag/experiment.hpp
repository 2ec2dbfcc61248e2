#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fdiag/dataset.hpp"
#include "fdiag/eval.hpp"
#include "fdiag/features.hpp"
#include "fdiag/model.hpp"
#include "fdiag/training.hpp"

namespace fdiag {

// Invalid configuration; the message names the offending key path.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Variant {
    HeadMode head_mode = HeadMode::MOC;
    NormMethod norm_method = NormMethod::FLN;
    friend auto operator<=>(const Variant&, const Variant&) = default;
};
// "MOC-FLN" style label and "moc_fln" style file tag.
std::string variant_label(const Variant& v);
std::string variant_tag(const Variant& v);
Variant parse_variant(const std::string& s);
// MCC-FLN, MOC-FLN, then MOC with BN, LN, TLN, IN.
std::vector<Variant> default_variants();

struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::filesystem::path out_dir = "runs";
    std::optional<std::filesystem::path> data_dir;  // default: <out_dir>/data

    SynthConfig synth;
    std::map<Subset, SubsetSpec> subsets;
    SampleCounts counts;
    double labeled_fraction = 0.1;  // target-side labeled share; source roles use every label

    StftConfig stft;
    double floor_eps = kDefaultFloorEps;

    ArchConfig arch;
    TrainConfig train;

    std::vector<DomainPair> pairs;
    std::vector<Variant> variants;
    std::vector<std::uint64_t> ablation_seeds{0};
    std::size_t ablation_pretrain_epochs = 30;
    std::size_t ablation_finetune_epochs = 30;
    std::size_t parallel = 1;

    ExperimentConfig();
    std::filesystem::path data_path() const { return data_dir ? *data_dir : out_dir / "data"; }
    void validate() const;
};

// Unknown keys raise ConfigError naming their path.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
nlohmann::ordered_json config_to_json(const ExperimentConfig& cfg);

// Dataset seed of a subset under a master seed.
std::uint64_t subset_seed(std::uint64_t master, Subset s);

// Datasets and their features, read from <data>/<letter>; features are cached on disk.
DomainDataset load_subset(const ExperimentConfig& cfg, Subset s);
FeatureSet load_features(const ExperimentConfig& cfg, Subset s);
FeatureSet feature_set(const DomainDataset& ds, const StftConfig& stft, double floor_eps);

struct CellResult {
    DomainPair pair;
    Variant variant;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    EvalReport report;
    std::size_t pretrain_best_epoch = 0;
    std::size_t finetune_best_epoch = 0;
    std::vector<std::string> warnings;
};

// Pretrain on the fully labeled source, finetune on the partially labeled
// target, evaluate on the target's unlabeled samples.
struct DaRun {
    TrainResult pretrain;
    TrainResult finetune;
    EvalReport report;
};
DaRun run_domain_adaptation(const FeatureSet& src, const FeatureSet& tgt, const ArchConfig& arch,
                            const TrainConfig& train);
// Finetune + evaluate from an already pretrained model.
DaRun finetune_and_evaluate(const TrainResult& pretrained, const FeatureSet& src, const FeatureSet& tgt,
                            const TrainConfig& train);

// Per-cell isolated grid; pretraining is shared per (source, variant, seed).
// parallel > 1 runs cells on that many threads; results do not depend on it.
std::vector<CellResult> run_ablation_grid(const std::map<Subset, FeatureSet>& data,
                                          const std::vector<DomainPair>& pairs,
                                          const std::vector<Variant>& variants,
                                          const std::vector<std::uint64_t>& seeds, const ArchConfig& arch,
                                          const TrainConfig& train, std::size_t parallel,
                                          std::ostream* log = nullptr);

nlohmann::ordered_json cells_to_json(const std::vector<CellResult>& cells);
std::vector<CellResult> cells_from_json(const nlohmann::json& j);

struct AblationTables {
    AblationTable architecture;   // columns MCC, MOC (FLN)
    AblationTable normalization;  // columns BN, LN, TLN, IN, FLN (MOC)
    std::string per_fault_csv;    // variant, IRF, ORF, MIS, UNB averaged over pairs and seeds
};
// Table cells are means over seeds of the successful runs.
AblationTables build_tables(const std::vector<CellResult>& cells);

// Writes table1_architecture.csv, table2_normalization.csv, per_fault.csv.
std::vector<std::string> write_tables(const std::vector<CellResult>& cells, const std::filesystem::path& dir);

std::string run_tag(const DomainPair& pair, const Variant& v);  // e.g. A2B_moc_fln

// Command entry points; they throw ConfigError, MissingInput or NumericalError.
void cmd_synth(const ExperimentConfig& cfg, std::ostream& log);
void cmd_train(const ExperimentConfig& cfg, std::ostream& log);
void cmd_evaluate(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& checkpoint,
                  std::ostream& log);
void cmd_ablate(const ExperimentConfig& cfg, std::ostream& log);
void cmd_report(const ExperimentConfig& cfg, std::ostream& log);

}  // namespace fdiag

// fdiag: synthesize domains, train and evaluate variants, run the ablation grid.
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fdiag/binary_io.hpp"
#include "fdiag/experiment.hpp"
#include "fdiag/runtime.hpp"

namespace {

enum Exit { kOk = 0, kConfigError = 1, kMissingInput = 2, kNumerical = 3 };

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    fdiag::tune_allocator();
    CLI::App app{"Compound-fault diagnosis experiments on synthetic vibration data"};
    app.require_subcommand(1, 1);

    std::string config_path, out_dir, data_dir, pairs, variants, checkpoint;
    std::optional<std::uint64_t> seed;
    std::optional<double> lr;
    std::optional<std::size_t> parallel;
    std::vector<std::size_t> epochs;
    bool paper_epochs = false;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "JSON experiment config");
        cmd->add_option("--seed", seed, "master seed");
        cmd->add_option("--out", out_dir, "output directory");
        cmd->add_option("--data", data_dir, "dataset root (default <out>/data)");
        cmd->add_option("--pairs", pairs, "comma-separated domain pairs, e.g. A2B,C2A");
        cmd->add_option("--variants", variants, "comma-separated variants, e.g. MOC-FLN,MCC-FLN");
        cmd->add_option("--epochs", epochs, "pretrain and finetune epochs")->expected(2);
        cmd->add_option("--lr", lr, "Adam learning rate");
        cmd->add_option("--parallel", parallel, "concurrent grid cells");
        cmd->add_flag("--paper-epochs", paper_epochs, "100+100 epochs for the ablation grid");
    };
    auto* synth = app.add_subcommand("synth", "generate datasets for subsets A, B, C");
    auto* train = app.add_subcommand("train", "pretrain on source, finetune on target, save checkpoint");
    auto* evaluate = app.add_subcommand("evaluate", "score a checkpoint on the target test split");
    auto* ablate = app.add_subcommand("ablate", "run the pair x variant grid and write both tables");
    auto* report = app.add_subcommand("report", "rebuild the tables from saved ablation results");
    for (auto* cmd : {synth, train, evaluate, ablate, report}) add_common(cmd);
    evaluate->add_option("--checkpoint", checkpoint, "checkpoint directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfigError;
    }

    try {
        fdiag::ExperimentConfig cfg = config_path.empty() ? fdiag::ExperimentConfig{} : fdiag::load_config(config_path);
        if (seed) cfg.seed = *seed;
        if (!out_dir.empty()) cfg.out_dir = out_dir;
        if (!data_dir.empty()) cfg.data_dir = data_dir;
        if (!pairs.empty()) {
            cfg.pairs.clear();
            for (const auto& p : split_list(pairs)) cfg.pairs.push_back(fdiag::parse_pair(p));
        }
        if (!variants.empty()) {
            cfg.variants.clear();
            for (const auto& v : split_list(variants)) cfg.variants.push_back(fdiag::parse_variant(v));
        }
        if (paper_epochs) {
            cfg.ablation_pretrain_epochs = 100;
            cfg.ablation_finetune_epochs = 100;
        }
        if (epochs.size() == 2) {
            cfg.train.pretrain_epochs = cfg.ablation_pretrain_epochs = epochs[0];
            cfg.train.finetune_epochs = cfg.ablation_finetune_epochs = epochs[1];
        }
        if (lr) cfg.train.lr = *lr;
        if (parallel) cfg.parallel = *parallel;
        cfg.validate();

        if (synth->parsed()) fdiag::cmd_synth(cfg, std::cout);
        else if (train->parsed()) fdiag::cmd_train(cfg, std::cout);
        else if (evaluate->parsed())
            fdiag::cmd_evaluate(cfg, checkpoint.empty() ? std::nullopt : std::optional<std::filesystem::path>(checkpoint),
                                std::cout);
        else if (ablate->parsed()) fdiag::cmd_ablate(cfg, std::cout);
        else if (report->parsed()) fdiag::cmd_report(cfg, std::cout);
        return kOk;
    } catch (const fdiag::MissingInput& e) {
        std::cerr << "missing input: " << e.what() << "\n";
        return kMissingInput;
    } catch (const fdiag::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kNumerical;
    } catch (const fdiag::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const std::exception& e) {
        // Unwritable paths, malformed files and the like.
        std::cerr << "error: " << e.what() << "\n";
        return kConfigError;
    }
}

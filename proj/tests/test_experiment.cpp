#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "fdiag/binary_io.hpp"
#include "fdiag/checkpoint.hpp"
#include "fdiag/experiment.hpp"

using namespace fdiag;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("fdiag_test_" + name);
    fs::remove_all(dir);
    return dir;
}

ExperimentConfig small_config(const fs::path& out) {
    ExperimentConfig cfg;
    cfg.out_dir = out;
    cfg.synth.duration_s = 0.25;
    cfg.counts = SampleCounts{6, 2};
    cfg.labeled_fraction = 0.5;
    cfg.train.pretrain_epochs = 1;
    cfg.train.finetune_epochs = 1;
    cfg.ablation_pretrain_epochs = 1;
    cfg.ablation_finetune_epochs = 1;
    return cfg;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(FDIAG_CLI) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_SUITE("experiment") {

TEST_CASE("variants and tags") {
    CHECK(variant_label(Variant{HeadMode::MCC, NormMethod::FLN}) == "MCC-FLN");
    CHECK(variant_tag(Variant{HeadMode::MOC, NormMethod::FLN}) == "moc_fln");
    CHECK(parse_variant("moc-tln") == Variant{HeadMode::MOC, NormMethod::TLN});
    CHECK_THROWS(parse_variant("MOC"));
    CHECK(run_tag(DomainPair{Subset::A, Subset::B}, Variant{}) == "A2B_moc_fln");
    const auto v = default_variants();
    REQUIRE(v.size() == 6);
    CHECK(variant_label(v[0]) == "MCC-FLN");
    CHECK(variant_label(v[1]) == "MOC-FLN");
}

TEST_CASE("config round-trip and unknown keys") {
    ExperimentConfig cfg;
    cfg.seed = 42;
    cfg.train.lr = 5e-4;
    cfg.pairs = {DomainPair{Subset::C, Subset::A}};
    cfg.variants = {Variant{HeadMode::MCC, NormMethod::BN}};
    cfg.train.mmd.fixed_base_bandwidth = 2.5;
    const auto j = config_to_json(cfg);
    const auto back = config_from_json(nlohmann::json::parse(j.dump()));
    CHECK(config_to_json(back).dump() == j.dump());
    CHECK(back.seed == 42);
    CHECK(back.train.lr == 5e-4);

    CHECK_THROWS_WITH_AS(config_from_json(nlohmann::json::parse(R"({"train": {"lrr": 0.1}})")),
                         doctest::Contains("train.lrr"), ConfigError);
    CHECK_THROWS_WITH_AS(config_from_json(nlohmann::json::parse(R"({"synth": {"subsets": {"C": {"rpm": 1}}}})")),
                         doctest::Contains("synth.subsets.C.rpm"), ConfigError);
    CHECK_THROWS_WITH_AS(config_from_json(nlohmann::json::parse(R"({"colour": 1})")), doctest::Contains("colour"),
                         ConfigError);
    CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"train": {"lr": "fast"}})")), ConfigError);
    CHECK_THROWS_AS(load_config("/nonexistent/config.json"), MissingInput);
}

TEST_CASE("default counts give 450 samples per subset") {
    ExperimentConfig cfg;
    cfg.synth.duration_s = 0.0625;
    for (auto s : kAllSubsets) {
        const auto ds = make_domain_dataset(cfg.subsets.at(s), cfg.counts, cfg.labeled_fraction, cfg.synth,
                                            subset_seed(cfg.seed, s));
        CHECK(ds.size() == 450);
    }
    CHECK(subset_seed(0, Subset::A) != subset_seed(0, Subset::B));
}

TEST_CASE("synth writes three reproducible subsets") {
    const auto out = scratch("synth");
    auto cfg = small_config(out);
    std::ostringstream log;
    cmd_synth(cfg, log);
    std::string manifests[3];
    int i = 0;
    for (const char* s : {"A", "B", "C"}) {
        CHECK(fs::exists(out / "data" / s / "manifest.json"));
        manifests[i++] = read_text_file(out / "data" / s / "manifest.json");
        CHECK(load_dataset(out / "data" / s).size() == 6 + 35 * 2);
    }
    CHECK(fs::exists(out / "config.json"));
    cmd_synth(cfg, log);
    i = 0;
    for (const char* s : {"A", "B", "C"}) CHECK(read_text_file(out / "data" / s / "manifest.json") == manifests[i++]);
    fs::remove_all(out);
}

TEST_CASE("train, evaluate and repeat byte-identically") {
    const auto out = scratch("train");
    auto cfg = small_config(out);
    std::ostringstream log;
    cmd_synth(cfg, log);
    cmd_train(cfg, log);
    const auto ckpt = out / "ckpt_A2B_moc_fln";
    CHECK(fs::exists(ckpt / "index.json"));
    const auto history = read_text_file(out / "history_A2B_moc_fln.csv");
    CHECK(std::count(history.begin(), history.end(), '\n') == 1 + 2);
    const auto weights = read_text_file(ckpt / "tensors.bin");
    const auto index = read_text_file(ckpt / "index.json");
    CHECK(fs::exists(out / "eval_A2B_moc_fln.json"));

    cmd_train(cfg, log);
    CHECK(read_text_file(out / "history_A2B_moc_fln.csv") == history);
    CHECK(read_text_file(ckpt / "tensors.bin") == weights);
    CHECK(read_text_file(ckpt / "index.json") == index);

    std::ostringstream eval_log;
    cmd_evaluate(cfg, std::nullopt, eval_log);
    CHECK(eval_log.str().find("overall_macro_f1") != std::string::npos);
    CHECK_THROWS_AS(cmd_evaluate(cfg, out / "missing_ckpt", eval_log), MissingInput);

    auto two = cfg;
    two.pairs = {DomainPair{Subset::A, Subset::B}, DomainPair{Subset::B, Subset::C}};
    CHECK_THROWS_AS(cmd_train(two, log), ConfigError);
    fs::remove_all(out);
}

TEST_CASE("missing dataset names the path") {
    const auto out = scratch("missing");
    auto cfg = small_config(out);
    std::ostringstream log;
    const std::string data_dir = (out / "data").string();
    CHECK_THROWS_WITH_AS(cmd_train(cfg, log), doctest::Contains(data_dir.c_str()), MissingInput);
    CHECK_THROWS_AS(cmd_report(cfg, log), MissingInput);
}

TEST_CASE("ablation restricted to one pair") {
    const auto out = scratch("ablate");
    auto cfg = small_config(out);
    std::ostringstream log;
    cmd_synth(cfg, log);
    cfg.pairs = {DomainPair{Subset::A, Subset::C}};
    cfg.variants = {Variant{HeadMode::MCC, NormMethod::FLN}, Variant{HeadMode::MOC, NormMethod::FLN}};
    cmd_ablate(cfg, log);
    const auto t1 = read_text_file(out / "ablation" / "table1_architecture.csv");
    std::istringstream is(t1);
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(is, line)) lines.push_back(line);
    REQUIRE(lines.size() == 8);
    CHECK(lines[0] == "source_target,MCC,MOC");
    CHECK(lines[1] == "A2B,,");
    CHECK(lines[2].rfind("A2C,0.", 0) == 0);
    CHECK(lines[7] == "Average,,");
    const auto t2 = read_text_file(out / "ablation" / "table2_normalization.csv");
    CHECK(t2.rfind("source_target,BN,LN,TLN,IN,FLN\n", 0) == 0);
    CHECK(fs::exists(out / "ablation" / "per_fault.csv"));

    const auto cells = cells_from_json(nlohmann::json::parse(read_text_file(out / "ablation" / "cells.json")));
    CHECK(cells.size() == 2);
    CHECK(nlohmann::json::parse(cells_to_json(cells).dump()) == nlohmann::json::parse(read_text_file(out / "ablation" / "cells.json")));
    std::ostringstream rep;
    cmd_report(cfg, rep);
    CHECK(read_text_file(out / "ablation" / "table1_architecture.csv") == t1);
    fs::remove_all(out);
}

TEST_CASE("table aggregation") {
    std::vector<CellResult> cells;
    for (const auto& p : all_pairs()) {
        for (std::uint64_t seed : {0, 1}) {
            for (auto v : default_variants()) {
                CellResult c;
                c.pair = p;
                c.variant = v;
                c.seed = seed;
                c.ok = true;
                c.report.overall_macro_f1 = (v.head_mode == HeadMode::MCC ? 0.4 : 0.6) + 0.1 * double(seed);
                c.report.per_fault = {1.0, 0.5, 0.25, 0.0};
                cells.push_back(c);
            }
        }
    }
    cells.back().ok = false;  // a failed cell drops out of its mean
    const auto t = build_tables(cells);
    CHECK(*t.architecture.average[0] == doctest::Approx(0.45));
    CHECK(*t.architecture.average[1] == doctest::Approx(0.65));
    CHECK(*t.normalization.values[5][3] == doctest::Approx(0.6));
    CHECK(*t.normalization.values[4][3] == doctest::Approx(0.65));
    CHECK(t.per_fault_csv.rfind("variant,IRF,ORF,MIS,UNB\nMCC-FLN,1.000000,0.500000,0.250000,0.000000\n", 0) == 0);
}

}  // TEST_SUITE

TEST_SUITE("cli") {

TEST_CASE("exit codes") {
    const auto out = scratch("cli");
    fs::create_directories(out);
    CHECK(run_cli("--help") == 0);
    CHECK(run_cli("") == 1);
    CHECK(run_cli("train --bogus-flag") == 1);
    write_text_file(out / "bad.json", R"({"train": {"learning_rate": 0.1}})");
    CHECK(run_cli("train --config " + (out / "bad.json").string()) == 1);
    CHECK(run_cli("train --out " + (out / "nothing").string()) == 2);
    CHECK(run_cli("report --out " + (out / "nothing").string()) == 2);
    CHECK(run_cli("train --pairs A2A --out " + out.string()) == 1);
    CHECK(run_cli("train --variants MOC-XYZ --out " + out.string()) == 1);

    auto cfg = small_config(out);
    auto j = config_to_json(cfg);
    write_text_file(out / "small.json", j.dump());
    CHECK(run_cli("synth --config " + (out / "small.json").string()) == 0);
    CHECK(run_cli("train --epochs 1 1 --config " + (out / "small.json").string()) == 0);
    CHECK(run_cli("evaluate --config " + (out / "small.json").string()) == 0);
    // A learning rate this large drives the parameters to infinity.
    CHECK(run_cli("train --epochs 2 2 --lr 1e38 --config " + (out / "small.json").string()) == 3);
    fs::remove_all(out);
}

}  // TEST_SUITE

#include "fdiag/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <functional>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include "fdiag/binary_io.hpp"
#include "fdiag/checkpoint.hpp"

namespace fdiag {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Reads the known keys of one JSON object; finish() rejects everything else.
class ObjectReader {
public:
    ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception&) {
            throw ConfigError(where(key) + ": wrong value type");
        }
    }

    const json* sub(const char* key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    void finish() const {
        for (const auto& [key, value] : j_.items())
            if (!seen_.count(key)) throw ConfigError("unknown config key '" + where(key) + "'");
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

template <typename F>
auto as_config_error(const std::string& path, F&& f) {
    try {
        return f();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

RpmProfile read_profile(const json& j, const std::string& path) {
    ObjectReader r(j, path);
    std::string type;
    r.get("type", type);
    RpmProfile profile;
    if (type == "sinusoidal") {
        SinusoidalRpm p;
        r.get("mean_rpm", p.mean_rpm);
        r.get("amplitude_rpm", p.amplitude_rpm);
        r.get("period_s", p.period_s);
        r.get("phase_rad", p.phase_rad);
        profile = p;
    } else if (type == "triangular") {
        TriangularRpm p;
        r.get("min_rpm", p.min_rpm);
        r.get("max_rpm", p.max_rpm);
        r.get("period_s", p.period_s);
        profile = p;
    } else if (type == "constant") {
        ConstantRpm p;
        r.get("rpm", p.rpm);
        profile = p;
    } else {
        throw ConfigError(r.where("type") + ": unknown rpm profile type '" + type + "'");
    }
    r.finish();
    as_config_error(path, [&] { validate_profile(profile); });
    return profile;
}

std::optional<TorqueModulation> read_torque(const json& j, const std::string& path) {
    if (j.is_null()) return std::nullopt;
    ObjectReader r(j, path);
    TorqueModulation t;
    r.get("segment_s", t.segment_s);
    r.get("gain_min", t.gain_min);
    r.get("gain_max", t.gain_max);
    r.finish();
    return t;
}

void read_synth(const json& j, ExperimentConfig& cfg) {
    ObjectReader r(j, "synth");
    auto& s = cfg.synth;
    r.get("sample_rate_hz", s.sample_rate_hz);
    r.get("duration_s", s.duration_s);
    r.get("noise_std", s.noise_std);
    r.get("resonance_hz", s.resonance_hz);
    r.get("resonance_decay_s", s.resonance_decay_s);
    r.get("misalignment_1x_ratio", s.misalignment_1x_ratio);
    r.get("random_start", s.random_start);
    r.get("labeled_fraction", cfg.labeled_fraction);
    if (const json* a = r.sub("amplitudes")) {
        ObjectReader ar(*a, "synth.amplitudes");
        ar.get("unbalance", s.amplitudes.unbalance);
        ar.get("misalignment", s.amplitudes.misalignment);
        ar.get("irf", s.amplitudes.irf);
        ar.get("orf", s.amplitudes.orf);
        ar.finish();
    }
    if (const json* c = r.sub("counts")) {
        ObjectReader cr(*c, "synth.counts");
        cr.get("normal", cfg.counts.normal_n);
        cr.get("fault", cfg.counts.fault_n);
        cr.finish();
    }
    if (const json* subsets = r.sub("subsets")) {
        ObjectReader sr(*subsets, "synth.subsets");
        for (auto s_id : kAllSubsets) {
            const std::string letter(1, subset_letter(s_id));
            const json* spec_j = sr.sub(letter.c_str());
            if (!spec_j) continue;
            const std::string path = "synth.subsets." + letter;
            ObjectReader pr(*spec_j, path);
            auto& spec = cfg.subsets[s_id];
            if (const json* p = pr.sub("profile")) spec.profile = read_profile(*p, path + ".profile");
            if (const json* t = pr.sub("torque_modulation")) spec.torque_modulation = read_torque(*t, path + ".torque_modulation");
            pr.finish();
        }
        sr.finish();
    }
    r.finish();
}

void read_train(const json& j, TrainConfig& t) {
    ObjectReader r(j, "train");
    r.get("pretrain_epochs", t.pretrain_epochs);
    r.get("finetune_epochs", t.finetune_epochs);
    r.get("lr", t.lr);
    r.get("batch_size", t.batch_size);
    r.get("lambda_mmd", t.weights.mmd);
    r.get("lambda_em", t.weights.em);
    r.get("validation_fraction", t.validation_fraction);
    r.get("bn_momentum", t.bn_momentum);
    if (const json* a = r.sub("adam")) {
        ObjectReader ar(*a, "train.adam");
        ar.get("beta1", t.adam.beta1);
        ar.get("beta2", t.adam.beta2);
        ar.get("eps", t.adam.eps);
        ar.finish();
    }
    if (const json* m = r.sub("mmd")) {
        ObjectReader mr(*m, "train.mmd");
        mr.get("multipliers", t.mmd.bandwidth_multipliers);
        if (const json* b = mr.sub("base_bandwidth")) {
            if (b->is_null()) t.mmd.fixed_base_bandwidth.reset();
            else if (b->is_number()) t.mmd.fixed_base_bandwidth = b->get<double>();
            else throw ConfigError("train.mmd.base_bandwidth: expected a number or null");
        }
        std::string estimator = t.mmd.estimator == MmdEstimator::Biased ? "biased" : "unbiased";
        mr.get("estimator", estimator);
        if (estimator == "biased") t.mmd.estimator = MmdEstimator::Biased;
        else if (estimator == "unbiased") t.mmd.estimator = MmdEstimator::Unbiased;
        else throw ConfigError("train.mmd.estimator: expected 'biased' or 'unbiased'");
        mr.finish();
    }
    r.finish();
}

void read_ablation(const json& j, ExperimentConfig& cfg) {
    ObjectReader r(j, "ablation");
    // null keeps the defaults: every pair, the six variants.
    std::vector<std::string> pairs, variants;
    const json* jp = r.sub("pairs");
    const json* jv = r.sub("variants");
    if (jp && !jp->is_null()) r.get("pairs", pairs);
    if (jv && !jv->is_null()) r.get("variants", variants);
    if (jp) {
        cfg.pairs.clear();
        for (const auto& p : pairs) cfg.pairs.push_back(as_config_error("ablation.pairs", [&] { return parse_pair(p); }));
    }
    if (jv) {
        cfg.variants.clear();
        for (const auto& v : variants)
            cfg.variants.push_back(as_config_error("ablation.variants", [&] { return parse_variant(v); }));
    }
    r.get("seeds", cfg.ablation_seeds);
    r.get("pretrain_epochs", cfg.ablation_pretrain_epochs);
    r.get("finetune_epochs", cfg.ablation_finetune_epochs);
    r.get("parallel", cfg.parallel);
    r.finish();
}

ordered_json report_to_json(const EvalReport& r) {
    ordered_json per_fault;
    for (std::size_t f = 0; f < kNumFaults; ++f) per_fault[kFaultNames[f]] = r.per_fault[f];
    return {{"overall_macro_f1", r.overall_macro_f1},
            {"per_fault", per_fault},
            {"per_class_f1", r.per_class_f1},
            {"samples", r.samples}};
}

EvalReport report_from_json(const json& j) {
    EvalReport r;
    r.overall_macro_f1 = j.at("overall_macro_f1").get<double>();
    for (std::size_t f = 0; f < kNumFaults; ++f) r.per_fault[f] = j.at("per_fault").at(kFaultNames[f]).get<double>();
    r.per_class_f1 = j.at("per_class_f1").get<std::vector<double>>();
    r.samples = j.at("samples").get<std::size_t>();
    return r;
}

ArchConfig variant_arch(const ArchConfig& base, const Variant& v) {
    ArchConfig a = base;
    a.head_mode = v.head_mode;
    a.norm_method = v.norm_method;
    return a;
}

std::uint64_t init_seed(std::uint64_t train_seed) { return mix64(train_seed ^ 0x1417ULL); }

// Unlabeled target samples form the evaluation split.
EvalReport evaluate_target(const ModelParams<float>& params, const FeatureSet& tgt) {
    const auto rows = tgt.unlabeled_indices();
    if (rows.empty()) throw std::invalid_argument("target has no unlabeled samples to evaluate on");
    const auto sub = tgt.subset(rows);
    return evaluate(params, sub.x, sub.conds);
}

void write_history(const std::filesystem::path& path, const TrainResult& pre, const TrainResult& fine) {
    std::vector<EpochRecord> all = pre.history;
    all.insert(all.end(), fine.history.begin(), fine.history.end());
    std::ostringstream os;
    write_history_csv(os, all);
    write_text_file(path, os.str());
}

// Runs job(i) for i in [0, n) on up to `threads` workers.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& job) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) job(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t)
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) job(i);
        });
    for (auto& th : pool) th.join();
}

std::vector<DomainPair> effective_pairs(const ExperimentConfig& cfg) { return cfg.pairs.empty() ? all_pairs() : cfg.pairs; }
std::vector<Variant> effective_variants(const ExperimentConfig& cfg) {
    return cfg.variants.empty() ? default_variants() : cfg.variants;
}

void single_run_target(const ExperimentConfig& cfg, DomainPair& pair, Variant& variant) {
    if (cfg.pairs.size() > 1) throw ConfigError("--pairs: this command takes exactly one pair");
    if (cfg.variants.size() > 1) throw ConfigError("--variants: this command takes exactly one variant");
    pair = cfg.pairs.empty() ? DomainPair{Subset::A, Subset::B} : cfg.pairs[0];
    variant = cfg.variants.empty() ? Variant{} : cfg.variants[0];
}

}  // namespace

std::string variant_label(const Variant& v) {
    return std::string(to_string(v.head_mode)) + "-" + std::string(to_string(v.norm_method));
}

std::string variant_tag(const Variant& v) {
    std::string s = std::string(to_string(v.head_mode)) + "_" + std::string(to_string(v.norm_method));
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

Variant parse_variant(const std::string& s) {
    const auto sep = s.find_first_of("-_");
    if (sep == std::string::npos) throw std::invalid_argument("invalid variant '" + s + "' (expected e.g. MOC-FLN)");
    std::string head = s.substr(0, sep), norm = s.substr(sep + 1);
    for (auto* part : {&head, &norm})
        std::transform(part->begin(), part->end(), part->begin(), [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
    return {parse_head_mode(head), parse_norm_method(norm)};
}

std::vector<Variant> default_variants() {
    return {{HeadMode::MCC, NormMethod::FLN}, {HeadMode::MOC, NormMethod::FLN}, {HeadMode::MOC, NormMethod::BN},
            {HeadMode::MOC, NormMethod::LN},  {HeadMode::MOC, NormMethod::TLN}, {HeadMode::MOC, NormMethod::IN}};
}

std::string run_tag(const DomainPair& pair, const Variant& v) { return pair_label(pair) + "_" + variant_tag(v); }

ExperimentConfig::ExperimentConfig() {
    for (auto s : kAllSubsets) subsets[s] = default_subset_spec(s);
}

void ExperimentConfig::validate() const {
    as_config_error("synth", [&] { synth.validate(); });
    for (const auto& [s, spec] : subsets) {
        const std::string path = std::string("synth.subsets.") + subset_letter(s);
        as_config_error(path, [&] {
            validate_profile(spec.profile);
            SynthConfig sc = synth;
            sc.torque_modulation = spec.torque_modulation;
            sc.validate();
        });
    }
    if (counts.normal_n == 0 || counts.fault_n == 0) throw ConfigError("synth.counts: counts must be positive");
    if (!(labeled_fraction > 0.0 && labeled_fraction <= 1.0))
        throw ConfigError("synth.labeled_fraction: must lie in (0, 1]");
    as_config_error("stft", [&] { stft.validate(); });
    if (!(floor_eps > 0.0)) throw ConfigError("stft.floor_eps: must be positive");
    as_config_error("arch", [&] { arch.validate(); });
    as_config_error("train", [&] { train.validate(); });
    if (ablation_seeds.empty()) throw ConfigError("ablation.seeds: must not be empty");
    if (ablation_pretrain_epochs < 1 || ablation_finetune_epochs < 1)
        throw ConfigError("ablation: epochs must be >= 1");
    if (parallel < 1) throw ConfigError("ablation.parallel: must be >= 1");
}

ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig cfg;
    ObjectReader r(j, "");
    r.get("seed", cfg.seed);
    std::string out = cfg.out_dir.string();
    r.get("out_dir", out);
    cfg.out_dir = out;
    if (const json* d = r.sub("data_dir"); d && !d->is_null()) {
        if (!d->is_string()) throw ConfigError("data_dir: expected a string");
        cfg.data_dir = d->get<std::string>();
    }
    if (const json* s = r.sub("synth")) read_synth(*s, cfg);
    if (const json* s = r.sub("stft")) {
        ObjectReader sr(*s, "stft");
        sr.get("n_fft", cfg.stft.n_fft);
        sr.get("hop", cfg.stft.hop);
        sr.get("floor_eps", cfg.floor_eps);
        std::string window = "hann";
        sr.get("window", window);
        if (window != "hann") throw ConfigError("stft.window: only 'hann' is supported");
        sr.finish();
    }
    if (const json* a = r.sub("arch")) cfg.arch = as_config_error("arch", [&] { return arch_from_json(*a, "arch"); });
    if (const json* t = r.sub("train")) read_train(*t, cfg.train);
    if (const json* a = r.sub("ablation")) read_ablation(*a, cfg);
    r.finish();
    cfg.validate();
    return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw MissingInput("config file not found: " + path.string());
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

ordered_json config_to_json(const ExperimentConfig& cfg) {
    ordered_json subsets;
    for (const auto& [s, spec] : cfg.subsets) {
        ordered_json torque = nullptr;
        if (spec.torque_modulation)
            torque = {{"segment_s", spec.torque_modulation->segment_s},
                      {"gain_min", spec.torque_modulation->gain_min},
                      {"gain_max", spec.torque_modulation->gain_max}};
        subsets[std::string(1, subset_letter(s))] = {{"profile", profile_to_json(spec.profile)},
                                                     {"torque_modulation", torque}};
    }
    const auto& s = cfg.synth;
    ordered_json synth{{"sample_rate_hz", s.sample_rate_hz},
                       {"duration_s", s.duration_s},
                       {"noise_std", s.noise_std},
                       {"resonance_hz", s.resonance_hz},
                       {"resonance_decay_s", s.resonance_decay_s},
                       {"amplitudes",
                        {{"unbalance", s.amplitudes.unbalance},
                         {"misalignment", s.amplitudes.misalignment},
                         {"irf", s.amplitudes.irf},
                         {"orf", s.amplitudes.orf}}},
                       {"misalignment_1x_ratio", s.misalignment_1x_ratio},
                       {"random_start", s.random_start},
                       {"counts", {{"normal", cfg.counts.normal_n}, {"fault", cfg.counts.fault_n}}},
                       {"labeled_fraction", cfg.labeled_fraction},
                       {"subsets", subsets}};
    const auto& t = cfg.train;
    ordered_json mmd{{"multipliers", t.mmd.bandwidth_multipliers},
                     {"base_bandwidth", t.mmd.fixed_base_bandwidth ? ordered_json(*t.mmd.fixed_base_bandwidth) : ordered_json()},
                     {"estimator", t.mmd.estimator == MmdEstimator::Biased ? "biased" : "unbiased"}};
    ordered_json train{{"pretrain_epochs", t.pretrain_epochs},
                       {"finetune_epochs", t.finetune_epochs},
                       {"lr", t.lr},
                       {"batch_size", t.batch_size},
                       {"adam", {{"beta1", t.adam.beta1}, {"beta2", t.adam.beta2}, {"eps", t.adam.eps}}},
                       {"lambda_mmd", t.weights.mmd},
                       {"lambda_em", t.weights.em},
                       {"validation_fraction", t.validation_fraction},
                       {"bn_momentum", t.bn_momentum},
                       {"mmd", mmd}};
    ordered_json pairs, variants;
    for (const auto& p : cfg.pairs) pairs.push_back(pair_label(p));
    for (const auto& v : cfg.variants) variants.push_back(variant_label(v));
    return {{"seed", cfg.seed},
            {"out_dir", cfg.out_dir.string()},
            {"data_dir", cfg.data_dir ? ordered_json(cfg.data_dir->string()) : ordered_json()},
            {"synth", synth},
            {"stft", {{"n_fft", cfg.stft.n_fft}, {"hop", cfg.stft.hop}, {"window", "hann"}, {"floor_eps", cfg.floor_eps}}},
            {"arch", arch_to_json(cfg.arch)},
            {"train", train},
            {"ablation",
             {{"pairs", pairs},
              {"variants", variants},
              {"seeds", cfg.ablation_seeds},
              {"pretrain_epochs", cfg.ablation_pretrain_epochs},
              {"finetune_epochs", cfg.ablation_finetune_epochs},
              {"parallel", cfg.parallel}}}};
}

std::uint64_t subset_seed(std::uint64_t master, Subset s) {
    return mix64(mix64(master) ^ (0xda7a0000ULL + static_cast<std::uint64_t>(s)));
}

DomainDataset load_subset(const ExperimentConfig& cfg, Subset s) {
    return load_dataset(cfg.data_path() / std::string(1, subset_letter(s)));
}

FeatureSet feature_set(const DomainDataset& ds, const StftConfig& stft, double floor_eps) {
    FeatureSet f;
    f.x = batch_features(ds.signals, stft, floor_eps);
    f.conds = ds.conditions();
    for (const auto& r : ds.records) f.labeled.push_back(r.labeled);
    return f;
}

FeatureSet load_features(const ExperimentConfig& cfg, Subset s) {
    const auto dir = cfg.data_path() / std::string(1, subset_letter(s));
    const DomainDataset ds = load_dataset(dir);
    FeatureSet f;
    if (auto cached = load_feature_cache(dir, cfg.stft, cfg.floor_eps); cached && cached->batch() == ds.size()) {
        f.x = std::move(*cached);
        f.conds = ds.conditions();
        for (const auto& r : ds.records) f.labeled.push_back(r.labeled);
        return f;
    }
    f = feature_set(ds, cfg.stft, cfg.floor_eps);
    save_feature_cache(dir, f.x, cfg.stft, cfg.floor_eps);
    return f;
}

DaRun finetune_and_evaluate(const TrainResult& pretrained, const FeatureSet& src, const FeatureSet& tgt,
                            const TrainConfig& train) {
    DaRun run;
    run.pretrain = pretrained;
    run.finetune = finetune_target(pretrained.params, src.all_labeled(), tgt, train);
    run.report = evaluate_target(run.finetune.params, tgt);
    return run;
}

DaRun run_domain_adaptation(const FeatureSet& src, const FeatureSet& tgt, const ArchConfig& arch,
                            const TrainConfig& train) {
    const auto init = init_params<float>(arch, init_seed(train.seed));
    const auto pre = pretrain_source(init, src.all_labeled(), train);
    return finetune_and_evaluate(pre, src, tgt, train);
}

std::vector<CellResult> run_ablation_grid(const std::map<Subset, FeatureSet>& data, const std::vector<DomainPair>& pairs,
                                          const std::vector<Variant>& variants, const std::vector<std::uint64_t>& seeds,
                                          const ArchConfig& arch, const TrainConfig& train, std::size_t parallel,
                                          std::ostream* log) {
    std::mutex log_mutex;
    auto note = [&](const std::string& msg) {
        if (!log) return;
        std::lock_guard lock(log_mutex);
        *log << msg << std::endl;
    };

    struct PretrainJob {
        Subset source;
        Variant variant;
        std::uint64_t seed;
        std::optional<TrainResult> result;
        std::string error;
    };
    std::vector<PretrainJob> pre_jobs;
    std::map<std::tuple<Subset, Variant, std::uint64_t>, std::size_t> pre_index;
    for (const auto& v : variants)
        for (auto seed : seeds)
            for (const auto& p : pairs) {
                const auto key = std::make_tuple(p.source, v, seed);
                if (pre_index.count(key)) continue;
                pre_index[key] = pre_jobs.size();
                pre_jobs.push_back({p.source, v, seed, std::nullopt, {}});
            }

    parallel_for(pre_jobs.size(), parallel, [&](std::size_t i) {
        auto& job = pre_jobs[i];
        const std::string name = std::string("pretrain ") + subset_letter(job.source) + " " + variant_label(job.variant) +
                                 " seed " + std::to_string(job.seed);
        try {
            TrainConfig tc = train;
            tc.seed = job.seed;
            const auto init = init_params<float>(variant_arch(arch, job.variant), init_seed(job.seed));
            job.result = pretrain_source(init, data.at(job.source).all_labeled(), tc);
            note(name + ": best epoch " + std::to_string(job.result->best_epoch));
        } catch (const std::exception& e) {
            job.error = e.what();
            note(name + ": FAILED: " + job.error);
        }
    });

    std::vector<CellResult> cells;
    for (const auto& v : variants)
        for (auto seed : seeds)
            for (const auto& p : pairs) {
                CellResult c;
                c.pair = p;
                c.variant = v;
                c.seed = seed;
                cells.push_back(std::move(c));
            }

    parallel_for(cells.size(), parallel, [&](std::size_t i) {
        auto& cell = cells[i];
        const std::string name = pair_label(cell.pair) + " " + variant_label(cell.variant) + " seed " + std::to_string(cell.seed);
        const auto& pre = pre_jobs[pre_index.at({cell.pair.source, cell.variant, cell.seed})];
        if (!pre.result) {
            cell.error = "pretraining failed: " + pre.error;
            note(name + ": FAILED: " + cell.error);
            return;
        }
        try {
            TrainConfig tc = train;
            tc.seed = cell.seed;
            const auto run = finetune_and_evaluate(*pre.result, data.at(cell.pair.source), data.at(cell.pair.target), tc);
            cell.ok = true;
            cell.report = run.report;
            cell.pretrain_best_epoch = run.pretrain.best_epoch;
            cell.finetune_best_epoch = run.finetune.best_epoch;
            cell.warnings = run.pretrain.warnings;
            cell.warnings.insert(cell.warnings.end(), run.finetune.warnings.begin(), run.finetune.warnings.end());
            char buf[64];
            std::snprintf(buf, sizeof buf, ": macro F1 %.4f", cell.report.overall_macro_f1);
            note(name + buf);
        } catch (const std::exception& e) {
            cell.error = e.what();
            note(name + ": FAILED: " + cell.error);
        }
    });
    return cells;
}

ordered_json cells_to_json(const std::vector<CellResult>& cells) {
    ordered_json out = ordered_json::array();
    for (const auto& c : cells) {
        ordered_json j{{"pair", pair_label(c.pair)},
                       {"variant", variant_label(c.variant)},
                       {"seed", c.seed},
                       {"status", c.ok ? "ok" : "failed"}};
        if (c.ok) {
            j["report"] = report_to_json(c.report);
            j["pretrain_best_epoch"] = c.pretrain_best_epoch;
            j["finetune_best_epoch"] = c.finetune_best_epoch;
            j["warnings"] = c.warnings;
        } else {
            j["error"] = c.error;
        }
        out.push_back(j);
    }
    return out;
}

std::vector<CellResult> cells_from_json(const json& j) {
    std::vector<CellResult> cells;
    for (const auto& e : j) {
        CellResult c;
        c.pair = parse_pair(e.at("pair").get<std::string>());
        c.variant = parse_variant(e.at("variant").get<std::string>());
        c.seed = e.at("seed").get<std::uint64_t>();
        c.ok = e.at("status").get<std::string>() == "ok";
        if (c.ok) {
            c.report = report_from_json(e.at("report"));
            c.pretrain_best_epoch = e.value("pretrain_best_epoch", std::size_t{0});
            c.finetune_best_epoch = e.value("finetune_best_epoch", std::size_t{0});
            c.warnings = e.value("warnings", std::vector<std::string>{});
        } else {
            c.error = e.value("error", "");
        }
        cells.push_back(std::move(c));
    }
    return cells;
}

AblationTables build_tables(const std::vector<CellResult>& cells) {
    // Mean over seeds per (pair, variant).
    std::map<std::pair<std::string, std::string>, std::pair<double, int>> sums;
    std::map<std::string, std::pair<std::array<double, kNumFaults>, int>> fault_sums;
    std::vector<std::string> variant_order;
    for (const auto& c : cells) {
        if (!c.ok) continue;
        const auto label = variant_label(c.variant);
        auto& s = sums[{pair_label(c.pair), label}];
        s.first += c.report.overall_macro_f1;
        ++s.second;
        auto& f = fault_sums[label];
        if (f.second == 0) variant_order.push_back(label);
        for (std::size_t k = 0; k < kNumFaults; ++k) f.first[k] += c.report.per_fault[k];
        ++f.second;
    }
    std::map<std::pair<std::string, std::string>, double> t1, t2;
    for (const auto& [key, s] : sums) {
        const double mean = s.first / s.second;
        const auto v = parse_variant(key.second);
        if (v.norm_method == NormMethod::FLN) t1[{key.first, std::string(to_string(v.head_mode))}] = mean;
        if (v.head_mode == HeadMode::MOC) t2[{key.first, std::string(to_string(v.norm_method))}] = mean;
    }
    AblationTables tables;
    tables.architecture = ablation_table(t1, {"MCC", "MOC"});
    tables.normalization = ablation_table(t2, {"BN", "LN", "TLN", "IN", "FLN"});
    std::string csv = "variant";
    for (auto name : kFaultNames) csv += std::string(",") + name;
    csv += "\n";
    for (const auto& label : variant_order) {
        const auto& f = fault_sums[label];
        csv += label;
        for (std::size_t k = 0; k < kNumFaults; ++k) {
            char buf[32];
            std::snprintf(buf, sizeof buf, ",%.6f", f.first[k] / f.second);
            csv += buf;
        }
        csv += "\n";
    }
    tables.per_fault_csv = csv;
    return tables;
}

std::vector<std::string> write_tables(const std::vector<CellResult>& cells, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const auto tables = build_tables(cells);
    write_text_file(dir / "table1_architecture.csv", tables.architecture.to_csv());
    write_text_file(dir / "table2_normalization.csv", tables.normalization.to_csv());
    write_text_file(dir / "per_fault.csv", tables.per_fault_csv);
    std::vector<std::string> warnings;
    for (const auto& w : tables.architecture.warnings) warnings.push_back("table1: " + w);
    for (const auto& w : tables.normalization.warnings) warnings.push_back("table2: " + w);
    return warnings;
}

void cmd_synth(const ExperimentConfig& cfg, std::ostream& log) {
    const auto root = cfg.data_path();
    for (auto s : kAllSubsets) {
        const auto& spec = cfg.subsets.at(s);
        const auto ds = make_domain_dataset(spec, cfg.counts, cfg.labeled_fraction, cfg.synth, subset_seed(cfg.seed, s));
        const auto dir = root / std::string(1, subset_letter(s));
        std::filesystem::remove_all(dir);
        save_dataset(ds, dir);
        log << "subset " << subset_letter(s) << ": " << ds.size() << " samples (" << ds.labeled_indices().size()
            << " labeled) -> " << dir.string() << "\n";
    }
    std::filesystem::create_directories(cfg.out_dir);
    write_text_file(cfg.out_dir / "config.json", config_to_json(cfg).dump(1) + "\n");
}

void cmd_train(const ExperimentConfig& cfg, std::ostream& log) {
    DomainPair pair;
    Variant variant;
    single_run_target(cfg, pair, variant);
    const auto src = load_features(cfg, pair.source);
    const auto tgt = load_features(cfg, pair.target);
    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    const auto run = run_domain_adaptation(src, tgt, variant_arch(cfg.arch, variant), tc);

    const std::string tag = run_tag(pair, variant);
    std::filesystem::create_directories(cfg.out_dir);
    save_checkpoint(run.finetune.params, cfg.out_dir / ("ckpt_" + tag));
    write_history(cfg.out_dir / ("history_" + tag + ".csv"), run.pretrain, run.finetune);
    ordered_json summary{{"pair", pair_label(pair)},
                         {"variant", variant_label(variant)},
                         {"seed", cfg.seed},
                         {"pretrain_best_epoch", run.pretrain.best_epoch},
                         {"finetune_best_epoch", run.finetune.best_epoch},
                         {"target_test", report_to_json(run.report)}};
    write_text_file(cfg.out_dir / ("eval_" + tag + ".json"), summary.dump(1) + "\n");
    for (const auto* w : {&run.pretrain.warnings, &run.finetune.warnings})
        for (const auto& msg : *w) log << "warning: " << msg << "\n";
    char buf[128];
    std::snprintf(buf, sizeof buf, "%s %s: target macro F1 %.4f", pair_label(pair).c_str(), variant_label(variant).c_str(),
                  run.report.overall_macro_f1);
    log << buf << "\n";
}

void cmd_evaluate(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& checkpoint, std::ostream& log) {
    DomainPair pair;
    Variant variant;
    single_run_target(cfg, pair, variant);
    const auto ckpt_dir = checkpoint ? *checkpoint : cfg.out_dir / ("ckpt_" + run_tag(pair, variant));
    const auto params = load_checkpoint(ckpt_dir);
    const auto tgt = load_features(cfg, pair.target);
    const auto report = evaluate_target(params, tgt);
    log << "checkpoint " << ckpt_dir.string() << " on " << subset_letter(pair.target) << " test split\n";
    log << report_to_json(report).dump(1) << "\n";
}

void cmd_ablate(const ExperimentConfig& cfg, std::ostream& log) {
    const auto pairs = effective_pairs(cfg);
    const auto variants = effective_variants(cfg);
    std::map<Subset, FeatureSet> data;
    for (const auto& p : pairs)
        for (auto s : {p.source, p.target})
            if (!data.count(s)) data[s] = load_features(cfg, s);
    TrainConfig tc = cfg.train;
    tc.pretrain_epochs = cfg.ablation_pretrain_epochs;
    tc.finetune_epochs = cfg.ablation_finetune_epochs;
    log << "ablation: " << pairs.size() << " pairs x " << variants.size() << " variants x " << cfg.ablation_seeds.size()
        << " seeds, epochs " << tc.pretrain_epochs << "+" << tc.finetune_epochs << "\n";
    const auto cells = run_ablation_grid(data, pairs, variants, cfg.ablation_seeds, cfg.arch, tc, cfg.parallel, &log);

    const auto dir = cfg.out_dir / "ablation";
    std::filesystem::create_directories(dir);
    write_text_file(dir / "cells.json", cells_to_json(cells).dump(1) + "\n");
    for (const auto& w : write_tables(cells, dir)) log << "warning: " << w << "\n";
    const auto failed = std::count_if(cells.begin(), cells.end(), [](const CellResult& c) { return !c.ok; });
    if (failed) log << "warning: " << failed << " of " << cells.size() << " cells failed\n";
    log << "tables written to " << dir.string() << "\n";
    if (failed == static_cast<std::ptrdiff_t>(cells.size())) throw NumericalError("every ablation cell failed");
}

void cmd_report(const ExperimentConfig& cfg, std::ostream& log) {
    const auto dir = cfg.out_dir / "ablation";
    const auto path = dir / "cells.json";
    if (!std::filesystem::exists(path)) throw MissingInput("ablation results not found: " + path.string());
    const auto cells = cells_from_json(json::parse(read_text_file(path)));
    for (const auto& w : write_tables(cells, dir)) log << "warning: " << w << "\n";
    log << read_text_file(dir / "table1_architecture.csv") << "\n" << read_text_file(dir / "table2_normalization.csv");
}

}  // namespace fdiag

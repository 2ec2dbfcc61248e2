#include "fdiag/eval.hpp"

#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "fdiag/labels.hpp"
#include "fdiag/training.hpp"

namespace fdiag {

ConfusionMatrix::ConfusionMatrix(std::span<const int> preds, std::span<const int> labels, std::size_t k)
    : ConfusionMatrix(k) {
    if (preds.size() != labels.size()) throw std::invalid_argument("confusion matrix: length mismatch");
    for (std::size_t i = 0; i < preds.size(); ++i) add(labels[i], preds[i]);
}

void ConfusionMatrix::add(int truth, int pred) {
    if (truth < 0 || pred < 0 || static_cast<std::size_t>(truth) >= k_ || static_cast<std::size_t>(pred) >= k_)
        throw std::invalid_argument("confusion matrix: class index out of range");
    ++counts_[static_cast<std::size_t>(truth) * k_ + static_cast<std::size_t>(pred)];
}

std::size_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::size_t{0}); }

std::vector<double> ConfusionMatrix::per_class_f1() const {
    std::vector<double> f1(k_, 0.0);
    for (std::size_t c = 0; c < k_; ++c) {
        std::size_t row = 0, col = 0;
        for (std::size_t j = 0; j < k_; ++j) {
            row += at(c, j);
            col += at(j, c);
        }
        const double tp = static_cast<double>(at(c, c));
        const double precision = col ? tp / static_cast<double>(col) : 0.0;
        const double recall = row ? tp / static_cast<double>(row) : 0.0;
        f1[c] = precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    }
    return f1;
}

double ConfusionMatrix::macro_f1() const {
    if (k_ == 0) throw std::invalid_argument("macro_f1: no classes");
    const auto f1 = per_class_f1();
    return std::accumulate(f1.begin(), f1.end(), 0.0) / static_cast<double>(k_);
}

double macro_f1(std::span<const int> preds, std::span<const int> labels, std::size_t k) {
    if (preds.empty()) throw std::invalid_argument("macro_f1: empty input");
    return ConfusionMatrix(preds, labels, k).macro_f1();
}

EvalReport evaluate_predictions(std::span<const FaultCondition> preds, std::span<const FaultCondition> truths) {
    if (preds.empty()) throw std::invalid_argument("evaluate: empty split");
    if (preds.size() != truths.size()) throw std::invalid_argument("evaluate: length mismatch");
    EvalReport r;
    r.samples = preds.size();
    ConfusionMatrix joint(kNumJointClasses);
    std::vector<ConfusionMatrix> faults;
    for (std::size_t f = 0; f < kNumFaults; ++f) faults.emplace_back(static_cast<std::size_t>(kLevelCounts[f]));
    for (std::size_t i = 0; i < preds.size(); ++i) {
        joint.add(joint_from_levels(truths[i]), joint_from_levels(preds[i]));
        for (std::size_t f = 0; f < kNumFaults; ++f) faults[f].add(truths[i].level(f), preds[i].level(f));
    }
    r.per_class_f1 = joint.per_class_f1();
    r.overall_macro_f1 = joint.macro_f1();
    for (std::size_t f = 0; f < kNumFaults; ++f) r.per_fault[f] = faults[f].macro_f1();
    return r;
}

EvalReport evaluate(const ModelParams<float>& params, const Tensor4<float>& x, std::span<const FaultCondition> truths) {
    if (x.batch() != truths.size()) throw std::invalid_argument("evaluate: label count does not match the batch");
    const auto preds = predict(infer(params, x), params.arch.head_mode);
    return evaluate_predictions(preds, truths);
}

std::string pair_label(const DomainPair& p) {
    return std::string{subset_letter(p.source), '2', subset_letter(p.target)};
}

DomainPair parse_pair(const std::string& s) {
    if (s.size() != 3 || (s[1] != '2' && s[1] != '>'))
        throw std::invalid_argument("invalid domain pair '" + s + "' (expected e.g. A2B)");
    DomainPair p{parse_subset(s.substr(0, 1)), parse_subset(s.substr(2, 1))};
    if (p.source == p.target) throw std::invalid_argument("domain pair '" + s + "' has identical source and target");
    return p;
}

std::vector<DomainPair> all_pairs() {
    std::vector<DomainPair> out;
    for (auto s : kAllSubsets)
        for (auto t : kAllSubsets)
            if (s != t) out.push_back({s, t});
    return out;
}

AblationTable ablation_table(const std::map<std::pair<std::string, std::string>, double>& scores,
                             const std::vector<std::string>& columns) {
    if (columns.empty()) throw std::invalid_argument("ablation_table: no variant columns");
    AblationTable t;
    t.columns = columns;
    for (const auto& p : all_pairs()) t.row_labels.push_back(pair_label(p));
    t.values.assign(t.row_labels.size(), std::vector<std::optional<double>>(columns.size()));
    t.average.assign(columns.size(), std::nullopt);
    for (std::size_t c = 0; c < columns.size(); ++c) {
        double sum = 0.0;
        bool complete = true;
        for (std::size_t r = 0; r < t.row_labels.size(); ++r) {
            auto it = scores.find({t.row_labels[r], columns[c]});
            if (it == scores.end()) {
                complete = false;
                t.warnings.push_back("missing result for " + t.row_labels[r] + " / " + columns[c]);
                continue;
            }
            t.values[r][c] = it->second;
            sum += it->second;
        }
        if (complete) t.average[c] = sum / static_cast<double>(t.row_labels.size());
    }
    return t;
}

std::string AblationTable::to_csv() const {
    auto cell = [](const std::optional<double>& v) {
        if (!v) return std::string();
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6f", *v);
        return std::string(buf);
    };
    std::string out = "source_target";
    for (const auto& c : columns) out += "," + c;
    out += "\n";
    for (std::size_t r = 0; r < row_labels.size(); ++r) {
        out += row_labels[r];
        for (const auto& v : values[r]) out += "," + cell(v);
        out += "\n";
    }
    out += "Average";
    for (const auto& v : average) out += "," + cell(v);
    out += "\n";
    return out;
}

}  // namespace fdiag

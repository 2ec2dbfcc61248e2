#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fdiag/dataset.hpp"
#include "fdiag/model.hpp"
#include "fdiag/tensor.hpp"

namespace fdiag {

// Rows are true classes, columns predictions.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(std::size_t k = 0) : k_(k), counts_(k * k, 0) {}
    ConfusionMatrix(std::span<const int> preds, std::span<const int> labels, std::size_t k);

    void add(int truth, int pred);
    std::size_t classes() const { return k_; }
    std::size_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * k_ + pred]; }
    std::size_t total() const;
    // F1 per class; zero-support classes and zero denominators give 0.
    std::vector<double> per_class_f1() const;
    double macro_f1() const;

private:
    std::size_t k_;
    std::vector<std::size_t> counts_;
};

double macro_f1(std::span<const int> preds, std::span<const int> labels, std::size_t k);

struct EvalReport {
    double overall_macro_f1 = 0.0;              // over the 36 joint classes
    std::array<double, kNumFaults> per_fault{};  // IRF, ORF, MIS, UNB in their own level spaces
    std::vector<double> per_class_f1;            // joint classes
    std::size_t samples = 0;
};

EvalReport evaluate_predictions(std::span<const FaultCondition> preds, std::span<const FaultCondition> truths);
EvalReport evaluate(const ModelParams<float>& params, const Tensor4<float>& x, std::span<const FaultCondition> truths);

struct DomainPair {
    Subset source = Subset::A;
    Subset target = Subset::B;
    friend auto operator<=>(const DomainPair&, const DomainPair&) = default;
};
// "A2B" style labels.
std::string pair_label(const DomainPair& p);
DomainPair parse_pair(const std::string& s);
// A2B, A2C, B2A, B2C, C2A, C2B.
std::vector<DomainPair> all_pairs();

struct AblationTable {
    std::vector<std::string> columns;
    std::vector<std::string> row_labels;                     // pairs, without the Average row
    std::vector<std::vector<std::optional<double>>> values;  // [row][column]
    std::vector<std::optional<double>> average;              // blank when any pair is missing
    std::vector<std::string> warnings;

    std::string to_csv() const;
};

// Scores keyed by (pair label, column label). Rows are the six pairs in fixed order.
AblationTable ablation_table(const std::map<std::pair<std::string, std::string>, double>& scores,
                             const std::vector<std::string>& columns);

}  // namespace fdiag

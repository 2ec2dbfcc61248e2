#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "fdiag/losses.hpp"
#include "fdiag/model.hpp"

namespace fdiag {

// Raised when optimization produces a non-finite value.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainConfig {
    std::size_t pretrain_epochs = 100;
    std::size_t finetune_epochs = 100;
    double lr = 1e-3;
    std::size_t batch_size = 8;  // per stream
    AdamConfig adam;
    LossWeights weights;
    MkMmdConfig mmd;
    std::uint64_t seed = 0;
    double validation_fraction = 0.2;
    double bn_momentum = 0.1;

    void validate() const;
};

template <typename T>
struct OptState {
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;
    std::uint64_t step = 0;
};

// Bias-corrected Adam on every trainable tensor; throws NumericalError naming
// the first parameter with a non-finite gradient.
template <typename T>
void adam_step(ModelParams<T>& params, const ModelParams<T>& grads, OptState<T>& state, double lr,
               const AdamConfig& cfg);

// Featurized samples with their true conditions and labeled flags.
struct FeatureSet {
    Tensor4<float> x;
    std::vector<FaultCondition> conds;
    std::vector<bool> labeled;

    std::size_t size() const { return conds.size(); }
    std::vector<std::size_t> labeled_indices() const;
    std::vector<std::size_t> unlabeled_indices() const;
    // Same samples with every label visible.
    FeatureSet all_labeled() const;
    FeatureSet subset(std::span<const std::size_t> rows) const;
};

struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
};

// Stratified by joint class: each class contributes floor(fraction * n_c)
// samples, the remaining quota goes to the classes with the largest
// fractional remainders (ties in seeded random order), for a total of
// round(fraction * pool size). Members of a class are drawn in seeded order.
Split stratified_split(std::span<const FaultCondition> conds, std::span<const std::size_t> pool, double fraction,
                       std::uint64_t seed);

// Seeded shuffle of `items` cut into batches of batch_size; every item appears
// exactly once. A trailing batch of one is merged into the previous batch.
std::vector<std::vector<std::size_t>> epoch_batches(std::vector<std::size_t> items, std::size_t batch_size,
                                                    std::uint64_t seed);

enum class Phase { Pretrain, Finetune };

struct EpochRecord {
    Phase phase = Phase::Pretrain;
    std::size_t epoch = 0;  // 1-based within the phase
    LossTerms train;        // batch means over the epoch
    double val_loss = 0.0;
    bool has_val = true;
    bool selected = false;
};

struct TrainResult {
    ModelParams<float> params;
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;  // 1-based; 0 when no validation was possible
    std::vector<std::string> warnings;
};

// Supervised CCE on the source training split; keeps the parameters of the
// epoch with the lowest validation CCE (earliest on ties).
TrainResult pretrain_source(const ModelParams<float>& init, const FeatureSet& src, const TrainConfig& cfg);

// Each step draws one source batch (driving stream), one target-labeled and
// one target-unlabeled batch (cycling streams) and minimizes total_finetune_loss.
// Validation is CCE on the target-labeled validation split.
TrainResult finetune_target(const ModelParams<float>& init, const FeatureSet& src, const FeatureSet& tgt,
                            const TrainConfig& cfg);

// Mean supervised CCE in inference mode, in chunks.
double validation_cce(const ModelParams<float>& params, const FeatureSet& data, std::span<const std::size_t> rows);

// Inference-mode logits/features for the given rows, evaluated in chunks.
ForwardOut<float> infer(const ModelParams<float>& params, const Tensor4<float>& x, std::size_t chunk = 64);

std::string phase_name(Phase p);
// Header: epoch,phase,phase_epoch,cce_src,cce_tgt,mmd,em,train_total,val_loss,selected
void write_history_csv(std::ostream& os, std::span<const EpochRecord> history);

}  // namespace fdiag

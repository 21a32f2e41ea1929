#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cacao/dataset.hpp"
#include "cacao/nn.hpp"

namespace cacao {

struct AugmentFlags {
    bool hflip = false;
    bool rotate15 = false;
    bool brightness20 = false;

    bool empty() const { return !hflip && !rotate15 && !brightness20; }
    static AugmentFlags all() { return {true, true, true}; }
    // Comma-separated subset of "hflip,rotate15,brightness20"; "" or "none" is empty.
    static AugmentFlags parse(const std::string& text);
    std::string to_string() const;
    bool operator==(const AugmentFlags&) const = default;
};

struct TrainConfig {
    float learning_rate = 0.01f;
    std::size_t batch_size = 16;
    std::size_t max_epochs = 30;
    std::size_t patience = 3;
    std::uint64_t seed = 42;
    AugmentFlags augmentation;
    bool rebalance = false;

    void validate() const;
};

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double train_acc = 0.0;
    double val_acc = 0.0;
    double train_loss = 0.0;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;  // 1-based; 0 when empty

    const EpochRecord& best() const { return epochs.at(best_epoch - 1); }
    // "epoch,train_acc,val_acc,train_loss" header plus one row per epoch.
    std::string to_csv() const;
    static TrainHistory from_csv(const std::string& text);
};

// -ln(probs[label]) with probs clamped below at 1e-12.
double cross_entropy(const Tensor& probs, std::size_t label);

// Returns the original first, then one variant per set flag in the order
// hflip, rotate15, brightness20. The rotation sign and brightness factor
// (0.8 or 1.2) are drawn from `seed`.
std::vector<Tensor> augment(const Tensor& image, AugmentFlags flags, std::uint64_t seed);

Tensor hflip(const Tensor& image);
Tensor rotate(const Tensor& image, double degrees);
Tensor scale_brightness(const Tensor& image, float factor);

// For each class below the majority, the (member index, cycle) pairs whose
// duplicates bring it level. Members are indices into `labels_of_items`.
struct Duplicate {
    std::size_t item;
    std::size_t cycle;  // 1 for the first pass over the class, 2 for the next...
};
std::vector<Duplicate> plan_oversampling(const std::vector<std::size_t>& labels_of_items, std::size_t num_labels);

// Oversamples minority classes among the accepted training records (all
// accepted records when none are tagged train) by appending augmented
// duplicates. Throws EmptyClass when a label in `labels` has no records.
DatasetManifest rebalance(const DatasetManifest& manifest, const std::vector<std::string>& labels, std::uint64_t seed);

// Decides when to halt: stop once `patience` epochs pass without a strictly
// better validation accuracy. Ties keep the earlier epoch.
class EarlyStopping {
public:
    explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

    // Records one epoch's validation accuracy; returns true when training
    // should halt after it.
    bool update(double val_acc);

    std::size_t best_epoch() const { return best_epoch_; }
    double best_value() const { return best_; }
    std::size_t epochs_seen() const { return epoch_; }
    bool last_improved() const { return since_best_ == 0; }

private:
    std::size_t patience_;
    std::size_t epoch_ = 0;
    std::size_t best_epoch_ = 0;
    std::size_t since_best_ = 0;
    double best_ = -1.0;
};

struct Sample {
    Tensor image;  // CHW in [0, 1]
    std::size_t label = 0;
};
using SampleSet = std::vector<Sample>;

// Loads the records of one split, resized to `resolution`. Oversampled
// duplicates get an augmented variant derived from their seed.
SampleSet load_samples(const DatasetManifest& manifest, Split split, const std::vector<std::string>& labels,
                       std::size_t resolution);

double accuracy(const Model& model, const SampleSet& samples);
std::vector<std::size_t> predict(const Model& model, const SampleSet& samples);

struct TrainResult {
    Model model;  // best-epoch snapshot
    TrainHistory history;
};

using EpochCallback = std::function<void(const EpochRecord&, bool improved)>;

// Plain SGD over shuffled mini-batches; evaluates validation accuracy after
// every epoch, keeps the best weights and stops per EarlyStopping.
TrainResult train(const ArchSpec& arch, const SampleSet& train_set, const SampleSet& val_set, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

}  // namespace cacao

#pragma once

#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include "cxr/data_source.hpp"
#include "cxr/loss.hpp"
#include "cxr/model.hpp"
#include "cxr/optim.hpp"

namespace cxr {

struct TrainPlan {
    int batch_size = 16;
    float lr = 1e-3f;
    int patience = 1;
    int max_epochs = 50;
    std::uint64_t seed = 0;
    float min_lr = 1e-6f;
    float plateau_factor = 0.5f;

    /// lr 0.001, batch 16 (transfer-learning regime).
    static TrainPlan transfer_defaults();
    /// lr 0.01, batch 8 (from-scratch large-input regime).
    static TrainPlan scratch_defaults();
};

struct EpochStats {
    int epoch = 0; // 1-based
    float train_loss = 0.0f;
    float val_loss = 0.0f;
    float lr = 0.0f;
};

struct TrainResult {
    std::vector<EpochStats> history;
    int best_epoch = -1; // 1-based; -1 when no epoch completed
    float best_val_loss = std::numeric_limits<float>::infinity();
    bool diverged = false;
};

struct BatchTensors {
    Tensor images;
    Tensor meta; // undefined unless the model consumes it
    std::vector<float> labels;
    std::vector<MetaFeatures> metas; // per-sample, kept for probe targets
    std::vector<float> ages;         // unscaled years
    std::vector<std::string> ids;
    int size = 0;
};

/// Assembles samples [from..to) of `order` into stacked tensors.
BatchTensors make_batch(const SampleSource& source, std::span<const std::size_t> order,
                        std::size_t from, std::size_t to, bool wants_meta,
                        std::uint64_t epoch_seed, bool train_mode);

/// Epoch-level training driver: shuffled train pass with ADAM updates,
/// full-validation loss, plateau schedule, best-epoch snapshot.
class Trainer {
public:
    Trainer(Model& model, const TrainPlan& plan);

    /// One epoch; returns its stats (also appended to the result history).
    /// Marks divergence instead of throwing when the loss leaves the finite
    /// range; further epochs are rejected.
    const EpochStats& run_epoch(const SampleSource& train, const SampleSource& val);

    const TrainResult& result() const { return result_; }
    bool diverged() const { return result_.diverged; }
    float lr() const { return adam_.lr(); }
    Model& model() { return model_; }

    /// Restores the parameters of the min-validation-loss epoch.
    void restore_best();

private:
    float run_split(const SampleSource& source, bool train_mode);
    /// Per-label vector targets for the model at hand (15 labels, or the
    /// probe's single regression/classification target).
    std::vector<float> batch_targets(const BatchTensors& batch) const;

    Model& model_;
    TrainPlan plan_;
    Adam adam_;
    PlateauSchedule schedule_;
    TrainResult result_;
    std::optional<Model::Snapshot> best_snapshot_;
    int epoch_ = 0;
};

/// Full protocol: runs up to max_epochs, then restores the best checkpoint
/// into the model. Throws UsageError on empty streams.
TrainResult train(Model& model, const TrainPlan& plan, const SampleSource& train_source,
                  const SampleSource& val_source);

void write_history_csv(const std::filesystem::path& path, std::span<const EpochStats> history);

/// Eval-mode scores for every sample, in index order. Output rows have 15
/// entries for classifiers, 1 for probes.
std::vector<std::vector<float>> predict(const Model& model, const SampleSource& source,
                                        int batch_size);

} // namespace cxr

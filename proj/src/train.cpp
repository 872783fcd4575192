#include "cxr/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "cxr/rng.hpp"

namespace cxr {

TrainPlan TrainPlan::transfer_defaults() {
    TrainPlan p;
    p.batch_size = 16;
    p.lr = 1e-3f;
    return p;
}

TrainPlan TrainPlan::scratch_defaults() {
    TrainPlan p;
    p.batch_size = 8;
    p.lr = 1e-2f;
    return p;
}

BatchTensors make_batch(const SampleSource& source, std::span<const std::size_t> order,
                        std::size_t from, std::size_t to, bool wants_meta,
                        std::uint64_t epoch_seed, bool train_mode) {
    BatchTensors batch;
    batch.size = static_cast<int>(to - from);
    std::vector<float> pixels;
    std::vector<int> image_shape;
    for (std::size_t i = from; i < to; ++i) {
        Sample s = source.get(order[i], epoch_seed, train_mode);
        if (s.image.defined()) {
            if (image_shape.empty()) {
                image_shape = s.image.shape();
                pixels.reserve(static_cast<std::size_t>(batch.size) * s.image.values().size());
            } else if (s.image.shape() != image_shape) {
                throw ShapeError("batch images must share one shape");
            }
            pixels.insert(pixels.end(), s.image.values().begin(), s.image.values().end());
        }
        batch.metas.push_back(s.meta);
        batch.ages.push_back(s.age_years);
        batch.ids.push_back(std::move(s.id));
        batch.labels.insert(batch.labels.end(), s.labels.begin(), s.labels.end());
    }
    if (!image_shape.empty()) {
        std::vector<int> shape = {batch.size};
        shape.insert(shape.end(), image_shape.begin(), image_shape.end());
        batch.images = Tensor::from(std::move(shape), std::move(pixels));
    }
    if (wants_meta) batch.meta = make_meta_tensor(batch.metas);
    return batch;
}

Trainer::Trainer(Model& model, const TrainPlan& plan)
    : model_(model),
      plan_(plan),
      adam_(model.trainable_params(), Adam::Config{plan.lr}),
      schedule_(plan.plateau_factor, plan.patience, plan.min_lr) {}

std::vector<float> Trainer::batch_targets(const BatchTensors& batch) const {
    if (model_.kind() != ModelKind::kProbe) return batch.labels;
    std::vector<float> t(static_cast<std::size_t>(batch.size));
    for (int i = 0; i < batch.size; ++i) {
        switch (model_.probe_target()) {
        case ProbeTarget::kAge: t[static_cast<std::size_t>(i)] = batch.ages[static_cast<std::size_t>(i)]; break;
        case ProbeTarget::kGender: t[static_cast<std::size_t>(i)] = batch.metas[static_cast<std::size_t>(i)].gender; break;
        case ProbeTarget::kView: t[static_cast<std::size_t>(i)] = batch.metas[static_cast<std::size_t>(i)].view; break;
        }
    }
    return t;
}

float Trainer::run_split(const SampleSource& source, bool train_mode) {
    const std::size_t n = source.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::uint64_t epoch_seed =
        Rng::mix(Rng::mix(plan_.seed, "epoch"), static_cast<std::uint64_t>(epoch_));
    if (train_mode) {
        Rng rng(epoch_seed);
        rng.shuffle(order);
    }

    const bool wants_meta = model_.kind() == ModelKind::kMetaMlp ||
                            (model_.kind() == ModelKind::kResNet && model_.config().use_meta);
    const auto bs = static_cast<std::size_t>(plan_.batch_size);
    double loss_sum = 0.0;
    for (std::size_t from = 0; from < n; from += bs) {
        const std::size_t to = std::min(n, from + bs);
        BatchTensors batch = make_batch(source, order, from, to, wants_meta, epoch_seed, train_mode);
        const std::vector<float> targets = batch_targets(batch);

        float batch_loss;
        if (train_mode) {
            const ForwardResult fwd = model_.forward(batch.images, batch.meta, BatchNormMode::kTrain);
            Tensor loss;
            if (model_.kind() == ModelKind::kProbe && model_.probe_target() == ProbeTarget::kAge)
                loss = mae_loss(fwd.logits, targets);
            else
                loss = bce_loss(fwd.probs, targets).scalar;
            batch_loss = loss.item();
            if (!std::isfinite(batch_loss)) {
                result_.diverged = true;
                return batch_loss;
            }
            adam_.zero_grad();
            loss.backward();
            try {
                adam_.step();
            } catch (const NumericError&) {
                result_.diverged = true;
                return std::numeric_limits<float>::quiet_NaN();
            }
        } else {
            NoGradGuard no_grad;
            const ForwardResult fwd = model_.forward(batch.images, batch.meta, BatchNormMode::kEval);
            if (model_.kind() == ModelKind::kProbe && model_.probe_target() == ProbeTarget::kAge)
                batch_loss = mae_loss(fwd.logits, targets).item();
            else
                batch_loss = bce_loss(fwd.probs, targets).scalar.item();
        }
        loss_sum += static_cast<double>(batch_loss) * static_cast<double>(to - from);
    }
    return static_cast<float>(loss_sum / static_cast<double>(n));
}

const EpochStats& Trainer::run_epoch(const SampleSource& train, const SampleSource& val) {
    if (result_.diverged) throw StateError("run_epoch after divergence");
    if (train.size() == 0 || val.size() == 0) throw UsageError("train: empty sample stream");

    ++epoch_;
    EpochStats stats;
    stats.epoch = epoch_;
    stats.lr = adam_.lr();
    stats.train_loss = run_split(train, true);
    if (result_.diverged || !std::isfinite(stats.train_loss)) {
        result_.diverged = true;
        stats.val_loss = std::numeric_limits<float>::quiet_NaN();
        result_.history.push_back(stats);
        return result_.history.back();
    }
    stats.val_loss = run_split(val, false);
    result_.history.push_back(stats);
    if (!std::isfinite(stats.val_loss)) {
        result_.diverged = true;
        return result_.history.back();
    }

    if (stats.val_loss < result_.best_val_loss) {
        result_.best_val_loss = stats.val_loss;
        result_.best_epoch = epoch_;
        best_snapshot_ = model_.snapshot();
    }
    adam_.set_lr(schedule_.update(stats.val_loss, adam_.lr()));
    return result_.history.back();
}

void Trainer::restore_best() {
    if (best_snapshot_) model_.restore(*best_snapshot_);
}

TrainResult train(Model& model, const TrainPlan& plan, const SampleSource& train_source,
                  const SampleSource& val_source) {
    if (train_source.size() == 0 || val_source.size() == 0)
        throw UsageError("train: empty sample stream");
    Trainer trainer(model, plan);
    for (int e = 0; e < plan.max_epochs; ++e) {
        trainer.run_epoch(train_source, val_source);
        if (trainer.diverged()) break;
    }
    trainer.restore_best();
    return trainer.result();
}

void write_history_csv(const std::filesystem::path& path, std::span<const EpochStats> history) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write history CSV '" + path.string() + "'");
    out << "epoch,train_loss,val_loss,lr\n";
    char buf[128];
    for (const EpochStats& e : history) {
        std::snprintf(buf, sizeof(buf), "%d,%.7g,%.7g,%.7g\n", e.epoch,
                      static_cast<double>(e.train_loss), static_cast<double>(e.val_loss),
                      static_cast<double>(e.lr));
        out << buf;
    }
}

std::vector<std::vector<float>> predict(const Model& model, const SampleSource& source,
                                        int batch_size) {
    NoGradGuard no_grad;
    const std::size_t n = source.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const bool wants_meta = model.kind() == ModelKind::kMetaMlp ||
                            (model.kind() == ModelKind::kResNet && model.config().use_meta);
    std::vector<std::vector<float>> out;
    out.reserve(n);
    const auto bs = static_cast<std::size_t>(batch_size);
    for (std::size_t from = 0; from < n; from += bs) {
        const std::size_t to = std::min(n, from + bs);
        BatchTensors batch = make_batch(source, order, from, to, wants_meta, 0, false);
        const ForwardResult fwd = model.forward(batch.images, batch.meta, BatchNormMode::kEval);
        const int width = fwd.probs.dim(1);
        for (int i = 0; i < batch.size; ++i) {
            std::vector<float> row(static_cast<std::size_t>(width));
            for (int j = 0; j < width; ++j)
                row[static_cast<std::size_t>(j)] =
                    fwd.probs.values()[static_cast<std::size_t>(i) * width + j];
            out.push_back(std::move(row));
        }
    }
    return out;
}

} // namespace cxr

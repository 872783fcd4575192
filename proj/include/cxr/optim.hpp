#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "cxr/tensor.hpp"

namespace cxr {

/// Bias-corrected ADAM over a fixed parameter set. Parameters with no grad
/// populated are skipped for the update but their moments still decay with
/// zero gradient, so `step()` after `zero_grad()` is a no-op on fresh state.
class Adam {
public:
    struct Config {
        float lr = 1e-3f;
        float beta1 = 0.9f;
        float beta2 = 0.999f;
        float eps = 1e-8f;
    };

    Adam(std::vector<std::pair<std::string, Tensor>> params, Config config);

    /// One update from the currently accumulated grads.
    /// Throws NumericError naming the parameter on a non-finite gradient.
    void step();
    void zero_grad();

    float lr() const { return config_.lr; }
    void set_lr(float lr) { config_.lr = lr; }
    std::int64_t steps() const { return t_; }

private:
    struct Slot {
        std::vector<float> m, v;
    };
    std::vector<std::pair<std::string, Tensor>> params_;
    std::vector<Slot> slots_;
    Config config_;
    std::int64_t t_ = 0;
};

/// Halves the learning rate when the best validation loss fails to improve
/// for `patience` consecutive epochs; never drops below `min_lr`.
class PlateauSchedule {
public:
    PlateauSchedule(float factor = 0.5f, int patience = 1, float min_lr = 1e-6f)
        : factor_(factor), patience_(patience), min_lr_(min_lr) {}

    /// Feed one epoch's validation loss; returns the learning rate to use next.
    float update(float val_loss, float current_lr);

    float best() const { return best_; }

private:
    float factor_;
    int patience_;
    float min_lr_;
    float best_ = std::numeric_limits<float>::infinity();
    int stale_epochs_ = 0;
};

} // namespace cxr

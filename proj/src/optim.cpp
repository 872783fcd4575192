#include "cxr/optim.hpp"

#include <cmath>
#include <limits>

namespace cxr {

Adam::Adam(std::vector<std::pair<std::string, Tensor>> params, Config config)
    : params_(std::move(params)), config_(config) {
    slots_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const std::size_t n = params_[i].second.values().size();
        slots_[i].m.assign(n, 0.0f);
        slots_[i].v.assign(n, 0.0f);
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(config_.beta1), static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(static_cast<double>(config_.beta2), static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& [name, p] = params_[i];
        auto& slot = slots_[i];
        auto vals = p.values_mut();
        const auto g = p.grad();
        for (std::size_t j = 0; j < vals.size(); ++j) {
            const float gj = g.empty() ? 0.0f : g[j];
            if (!std::isfinite(gj))
                throw NumericError("adam: non-finite gradient in parameter '" + name + "'");
            slot.m[j] = config_.beta1 * slot.m[j] + (1.0f - config_.beta1) * gj;
            slot.v[j] = config_.beta2 * slot.v[j] + (1.0f - config_.beta2) * gj * gj;
            const double mhat = slot.m[j] / bc1;
            const double vhat = slot.v[j] / bc2;
            vals[j] -= static_cast<float>(config_.lr * mhat / (std::sqrt(vhat) + config_.eps));
        }
    }
}

void Adam::zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
}

float PlateauSchedule::update(float val_loss, float current_lr) {
    if (val_loss < best_) {
        best_ = val_loss;
        stale_epochs_ = 0;
        return current_lr;
    }
    if (++stale_epochs_ >= patience_) {
        stale_epochs_ = 0;
        return std::max(min_lr_, current_lr * factor_);
    }
    return current_lr;
}

} // namespace cxr

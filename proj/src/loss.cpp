#include "cxr/loss.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace cxr {

namespace {

struct BceOp final : OpNode {
    std::vector<float> targets;
    int n = 0, m = 0;
    const char* name() const override { return "bce_loss"; }
    void backward(const TensorImpl& out) override {
        Tensor probs = inputs[0];
        if (!probs.defined() || !probs.needs_grad()) return;
        if (probs.impl().grad.empty()) probs.impl().grad.assign(probs.values().size(), 0.0f);
        auto& g = probs.impl().grad;
        const auto& f = probs.values();
        const float go = out.grad[0] / static_cast<float>(static_cast<std::int64_t>(n) * m);
        constexpr float lo = kProbClamp, hi = 1.0f - kProbClamp;
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (f[i] <= lo || f[i] >= hi) continue; // clamp region: zero gradient
            const float y = targets[i];
            g[i] += go * (-y / f[i] + (1.0f - y) / (1.0f - f[i]));
        }
    }
};

struct MaeOp final : OpNode {
    std::vector<float> targets;
    const char* name() const override { return "mae_loss"; }
    void backward(const TensorImpl& out) override {
        Tensor preds = inputs[0];
        if (!preds.defined() || !preds.needs_grad()) return;
        if (preds.impl().grad.empty()) preds.impl().grad.assign(preds.values().size(), 0.0f);
        auto& g = preds.impl().grad;
        const auto& p = preds.values();
        const float go = out.grad[0] / static_cast<float>(p.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
            const float d = p[i] - targets[i];
            if (d > 0.0f)
                g[i] += go;
            else if (d < 0.0f)
                g[i] -= go;
        }
    }
};

} // namespace

LossValue bce_loss(const Tensor& probs, std::span<const float> targets) {
    if (probs.ndim() != 2) throw ShapeError("bce_loss expects probabilities of shape [N,M]");
    const int n = probs.dim(0), m = probs.dim(1);
    if (static_cast<std::int64_t>(targets.size()) != probs.numel())
        throw ShapeError("bce_loss target count mismatch");
    for (const float y : targets)
        if (y != 0.0f && y != 1.0f)
            throw ValueError("bce_loss labels must be binary, got " + std::to_string(y));

    constexpr double lo = kProbClamp, hi = 1.0 - static_cast<double>(kProbClamp);
    std::vector<float> per_label(static_cast<std::size_t>(m));
    for (int mi = 0; mi < m; ++mi) {
        double acc = 0.0;
        for (int ni = 0; ni < n; ++ni) {
            const std::size_t idx = static_cast<std::size_t>(ni) * m + mi;
            const double f = std::clamp(static_cast<double>(probs.values()[idx]), lo, hi);
            const double y = targets[idx];
            acc += -y * std::log(f) - (1.0 - y) * std::log(1.0 - f);
        }
        per_label[static_cast<std::size_t>(mi)] = static_cast<float>(acc / n);
    }
    double total = 0.0;
    for (const float v : per_label) total += v;
    const float scalar = static_cast<float>(total / m);

    auto node = std::make_shared<BceOp>();
    node->targets.assign(targets.begin(), targets.end());
    node->n = n;
    node->m = m;
    node->inputs = {probs};
    LossValue lv;
    lv.scalar = Tensor::make_result({1}, {scalar}, std::move(node));
    lv.per_label = std::move(per_label);
    return lv;
}

Tensor mae_loss(const Tensor& preds, std::span<const float> targets) {
    if (static_cast<std::int64_t>(targets.size()) != preds.numel())
        throw ShapeError("mae_loss target count mismatch");
    if (preds.numel() == 0) throw ShapeError("mae_loss on empty tensor");
    double acc = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i)
        acc += std::abs(static_cast<double>(preds.values()[i]) - targets[i]);
    auto node = std::make_shared<MaeOp>();
    node->targets.assign(targets.begin(), targets.end());
    node->inputs = {preds};
    return Tensor::make_result({1}, {static_cast<float>(acc / static_cast<double>(targets.size()))},
                               std::move(node));
}

} // namespace cxr

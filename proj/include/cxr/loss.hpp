#pragma once

#include <span>
#include <vector>

#include "cxr/tensor.hpp"

namespace cxr {

/// Class-averaged binary cross entropy. The scalar is the mean of the
/// per-label vector (which itself averages over the batch).
struct LossValue {
    Tensor scalar;
    std::vector<float> per_label;
};

/// probs: [N,M] in (0,1); targets: N*M flat row-major values in {0,1}.
/// Probabilities are clamped to [1e-7, 1-1e-7] before the logs; no gradient
/// flows where the clamp binds.
LossValue bce_loss(const Tensor& probs, std::span<const float> targets);

/// Mean absolute error over [N] or [N,1] predictions; subgradient 0 at p == t.
Tensor mae_loss(const Tensor& preds, std::span<const float> targets);

inline constexpr float kProbClamp = 1e-7f;

} // namespace cxr

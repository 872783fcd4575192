#pragma once

#include "cxr/image.hpp"
#include "cxr/rng.hpp"
#include "cxr/tensor.hpp"

namespace cxr {

/// One concrete draw of the training augmentation: rotation, patch crop
/// (8-100% area, 3:4..4:3 aspect, uniform position), optional horizontal
/// flip. Applied in that order, then resized to S x S.
struct ResolvedAugment {
    float angle_deg = 0.0f;
    int crop_x = 0, crop_y = 0;
    int crop_w = 0, crop_h = 0;
    bool flip = false;
};

/// Samples crop parameters with up to 10 retries; falls back to the centered
/// min(W,H) square when no draw fits.
ResolvedAugment sample_augment(Rng& rng, int width, int height);

ImageF rotate_bilinear(const ImageF& img, float angle_deg); // zero fill outside
ImageF resize_bilinear(const ImageF& img, int out_w, int out_h);
ImageF crop(const ImageF& img, int x, int y, int w, int h);
ImageF hflip(const ImageF& img);

/// Deterministic application; output values in [0,1], shape [1,S,S].
Tensor apply_augment(const ImageU8& img, const ResolvedAugment& aug, int out_size);

/// The full training pipeline: rotate, random patch, flip p=0.5, resize.
Tensor augment_train(const ImageU8& img, Rng& rng, int out_size);

/// Deterministic eval path: squash-resize to the enlarged frame
/// (256 for S=224, 480 for S=448, S+32 otherwise), then center-crop S x S.
Tensor preprocess_eval(const ImageU8& img, int out_size);

/// [1,S,S] -> [C,S,S] by replication (for 3-channel transfer-learning input).
Tensor replicate_channels(const Tensor& chw1, int channels);

} // namespace cxr

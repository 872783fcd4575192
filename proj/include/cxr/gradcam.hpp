#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cxr/image.hpp"
#include "cxr/model.hpp"

namespace cxr {

/// Rectified, gradient-weighted sum of the final conv stage's channels for
/// one target label. `grid` is nonnegative at the stage resolution;
/// `rendering` is the bilinear upsampling normalized to [0,1] (an all-zero
/// map renders all-zero).
struct Heatmap {
    int grid_h = 0, grid_w = 0;
    std::vector<float> grid;
    int label = 0;
    std::string image_ref;
    int render_size = 0;
    std::vector<float> rendering;

    /// Argmax of the rendering in pixel coordinates (x, y).
    std::pair<int, int> argmax() const;
};

/// Channel weights are the spatial means of d(logit_label)/d(activations);
/// the gradient target is the pre-sigmoid logit.
Heatmap grad_cam(const Model& model, const Tensor& image, const Tensor& meta, int label,
                 const std::string& image_ref = "");

void save_heatmap_csv(const std::filesystem::path& path, const Heatmap& map);
void save_heatmap_png(const std::filesystem::path& path, const Heatmap& map);
/// 0.5-alpha blend of the heat color ramp over the grayscale input.
void save_overlay_png(const std::filesystem::path& path, const Heatmap& map, const ImageU8& base);

} // namespace cxr

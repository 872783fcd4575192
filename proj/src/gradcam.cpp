#include "cxr/gradcam.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "cxr/augment.hpp"

namespace cxr {

std::pair<int, int> Heatmap::argmax() const {
    std::size_t best = 0;
    for (std::size_t i = 1; i < rendering.size(); ++i)
        if (rendering[i] > rendering[best]) best = i;
    return {static_cast<int>(best % static_cast<std::size_t>(render_size)),
            static_cast<int>(best / static_cast<std::size_t>(render_size))};
}

Heatmap grad_cam(const Model& model, const Tensor& image, const Tensor& meta, int label,
                 const std::string& image_ref) {
    if (!image.defined() || image.ndim() != 3)
        throw UsageError("grad_cam expects a single [C,S,S] image");

    std::vector<int> batched_shape = {1, image.dim(0), image.dim(1), image.dim(2)};
    Tensor batched = Tensor::from(batched_shape,
                                  std::vector<float>(image.values().begin(), image.values().end()));

    ForwardResult fwd = model.forward(batched, meta, BatchNormMode::kEval);
    const int num_out = fwd.logits.dim(1);
    if (label < 0 || label >= num_out)
        throw UsageError("grad_cam: label index " + std::to_string(label) + " out of range [0," +
                         std::to_string(num_out) + ")");
    if (!fwd.final_conv.defined())
        throw UsageError("grad_cam requires a convolutional model");

    fwd.final_conv.set_retain_grad(true);
    std::vector<float> seed(static_cast<std::size_t>(num_out), 0.0f);
    seed[static_cast<std::size_t>(label)] = 1.0f;
    fwd.logits.backward(seed);

    const int channels = fwd.final_conv.dim(1);
    const int gh = fwd.final_conv.dim(2);
    const int gw = fwd.final_conv.dim(3);
    const std::size_t spatial = static_cast<std::size_t>(gh) * gw;
    const auto acts = fwd.final_conv.values();
    const auto grads = fwd.final_conv.grad();
    if (grads.empty()) throw StateError("grad_cam: no gradient reached the final conv stage");

    Heatmap map;
    map.grid_h = gh;
    map.grid_w = gw;
    map.label = label;
    map.image_ref = image_ref;
    map.grid.assign(spatial, 0.0f);
    for (int c = 0; c < channels; ++c) {
        const std::size_t base = static_cast<std::size_t>(c) * spatial;
        double w = 0.0;
        for (std::size_t i = 0; i < spatial; ++i) w += grads[base + i];
        w /= static_cast<double>(spatial);
        for (std::size_t i = 0; i < spatial; ++i)
            map.grid[i] += static_cast<float>(w) * acts[base + i];
    }
    for (auto& v : map.grid) v = std::max(v, 0.0f);

    map.render_size = image.dim(1);
    ImageF grid_img;
    grid_img.width = gw;
    grid_img.height = gh;
    grid_img.pixels = map.grid;
    const ImageF up = resize_bilinear(grid_img, map.render_size, map.render_size);
    map.rendering = up.pixels;
    const float peak = *std::max_element(map.rendering.begin(), map.rendering.end());
    if (peak > 0.0f)
        for (auto& v : map.rendering) v /= peak;
    return map;
}

void save_heatmap_csv(const std::filesystem::path& path, const Heatmap& map) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write heatmap CSV '" + path.string() + "'");
    char buf[32];
    for (int y = 0; y < map.grid_h; ++y) {
        for (int x = 0; x < map.grid_w; ++x) {
            std::snprintf(buf, sizeof(buf), "%s%.9g", x ? "," : "",
                          static_cast<double>(map.grid[static_cast<std::size_t>(y) * map.grid_w + x]));
            out << buf;
        }
        out << "\n";
    }
}

void save_heatmap_png(const std::filesystem::path& path, const Heatmap& map) {
    ImageF img;
    img.width = img.height = map.render_size;
    img.pixels = map.rendering;
    write_png_gray(path, to_u8(img));
}

void save_overlay_png(const std::filesystem::path& path, const Heatmap& map, const ImageU8& base) {
    if (base.width != map.render_size || base.height != map.render_size)
        throw ShapeError("overlay base image size does not match the rendering");
    std::vector<std::uint8_t> rgb(static_cast<std::size_t>(map.render_size) * map.render_size * 3);
    for (std::size_t i = 0; i < map.rendering.size(); ++i) {
        const float h = map.rendering[i];
        const float gray = static_cast<float>(base.pixels[i]) / 255.0f;
        // Simple heat ramp: black -> red -> yellow.
        const float hr = std::min(1.0f, 2.0f * h);
        const float hg = std::max(0.0f, 2.0f * h - 1.0f);
        auto mix = [&](float g, float c) {
            return static_cast<std::uint8_t>(std::lround(255.0f * (0.5f * g + 0.5f * c)));
        };
        rgb[3 * i] = mix(gray, hr);
        rgb[3 * i + 1] = mix(gray, hg);
        rgb[3 * i + 2] = mix(gray, 0.0f);
    }
    write_png_rgb(path, map.render_size, map.render_size, rgb);
}

} // namespace cxr

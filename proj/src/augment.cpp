#include "cxr/augment.hpp"

#include <algorithm>
#include <cmath>

namespace cxr {

namespace {

constexpr float kMaxRotationDeg = 7.0f;
constexpr double kMinAreaFrac = 0.08;
constexpr double kMaxAreaFrac = 1.0;
constexpr double kMinAspect = 3.0 / 4.0;
constexpr double kMaxAspect = 4.0 / 3.0;
constexpr int kCropRetries = 10;

float sample_at(const ImageF& img, double x, double y) {
    // Bilinear with zero outside the frame.
    const int x0 = static_cast<int>(std::floor(x));
    const int y0 = static_cast<int>(std::floor(y));
    const double fx = x - x0;
    const double fy = y - y0;
    auto pixel = [&](int xi, int yi) -> double {
        if (xi < 0 || yi < 0 || xi >= img.width || yi >= img.height) return 0.0;
        return img.at(xi, yi);
    };
    const double top = pixel(x0, y0) * (1.0 - fx) + pixel(x0 + 1, y0) * fx;
    const double bot = pixel(x0, y0 + 1) * (1.0 - fx) + pixel(x0 + 1, y0 + 1) * fx;
    return static_cast<float>(top * (1.0 - fy) + bot * fy);
}

} // namespace

ResolvedAugment sample_augment(Rng& rng, int width, int height) {
    ResolvedAugment a;
    a.angle_deg = static_cast<float>(rng.uniform(-kMaxRotationDeg, kMaxRotationDeg));

    const double full_area = static_cast<double>(width) * height;
    bool found = false;
    for (int attempt = 0; attempt < kCropRetries && !found; ++attempt) {
        const double area = rng.uniform(kMinAreaFrac, kMaxAreaFrac) * full_area;
        const double aspect = rng.uniform(kMinAspect, kMaxAspect);
        const int cw = static_cast<int>(std::lround(std::sqrt(area * aspect)));
        const int ch = static_cast<int>(std::lround(std::sqrt(area / aspect)));
        if (cw < 1 || ch < 1 || cw > width || ch > height) continue;
        a.crop_w = cw;
        a.crop_h = ch;
        a.crop_x = static_cast<int>(rng.uniform_int(0, width - cw));
        a.crop_y = static_cast<int>(rng.uniform_int(0, height - ch));
        found = true;
    }
    if (!found) {
        const int side = std::min(width, height);
        a.crop_w = a.crop_h = side;
        a.crop_x = (width - side) / 2;
        a.crop_y = (height - side) / 2;
    }
    a.flip = rng.bernoulli(0.5);
    return a;
}

ImageF rotate_bilinear(const ImageF& img, float angle_deg) {
    ImageF out;
    out.width = img.width;
    out.height = img.height;
    out.pixels.resize(img.pixels.size());
    const double rad = static_cast<double>(angle_deg) * std::numbers::pi / 180.0;
    const double c = std::cos(rad), s = std::sin(rad);
    const double cx = (img.width - 1) / 2.0;
    const double cy = (img.height - 1) / 2.0;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const double dx = x - cx, dy = y - cy;
            const double sx = c * dx + s * dy + cx;
            const double sy = -s * dx + c * dy + cy;
            out.pixels[static_cast<std::size_t>(y) * img.width + x] = sample_at(img, sx, sy);
        }
    return out;
}

ImageF resize_bilinear(const ImageF& img, int out_w, int out_h) {
    ImageF out;
    out.width = out_w;
    out.height = out_h;
    out.pixels.resize(static_cast<std::size_t>(out_w) * out_h);
    const double sx = static_cast<double>(img.width) / out_w;
    const double sy = static_cast<double>(img.height) / out_h;
    for (int y = 0; y < out_h; ++y) {
        const double srcy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
        for (int x = 0; x < out_w; ++x) {
            const double srcx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
            const int x0 = static_cast<int>(srcx);
            const int y0 = static_cast<int>(srcy);
            const int x1 = std::min(x0 + 1, img.width - 1);
            const int y1 = std::min(y0 + 1, img.height - 1);
            const double fx = srcx - x0, fy = srcy - y0;
            const double top = img.at(x0, y0) * (1.0 - fx) + img.at(x1, y0) * fx;
            const double bot = img.at(x0, y1) * (1.0 - fx) + img.at(x1, y1) * fx;
            out.pixels[static_cast<std::size_t>(y) * out_w + x] =
                static_cast<float>(top * (1.0 - fy) + bot * fy);
        }
    }
    return out;
}

ImageF crop(const ImageF& img, int x, int y, int w, int h) {
    if (x < 0 || y < 0 || w < 1 || h < 1 || x + w > img.width || y + h > img.height)
        throw ValueError("crop rectangle outside image bounds");
    ImageF out;
    out.width = w;
    out.height = h;
    out.pixels.resize(static_cast<std::size_t>(w) * h);
    for (int row = 0; row < h; ++row)
        std::copy_n(img.pixels.begin() + (static_cast<std::size_t>(y + row) * img.width + x), w,
                    out.pixels.begin() + static_cast<std::size_t>(row) * w);
    return out;
}

ImageF hflip(const ImageF& img) {
    ImageF out = img;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            out.pixels[static_cast<std::size_t>(y) * img.width + x] = img.at(img.width - 1 - x, y);
    return out;
}

namespace {

Tensor to_tensor(const ImageF& img) {
    std::vector<float> v = img.pixels;
    return Tensor::from({1, img.height, img.width}, std::move(v));
}

} // namespace

Tensor apply_augment(const ImageU8& img, const ResolvedAugment& aug, int out_size) {
    ImageF f = to_float(img);
    if (aug.angle_deg != 0.0f) f = rotate_bilinear(f, aug.angle_deg);
    f = crop(f, aug.crop_x, aug.crop_y, aug.crop_w, aug.crop_h);
    if (aug.flip) f = hflip(f);
    f = resize_bilinear(f, out_size, out_size);
    return to_tensor(f);
}

Tensor augment_train(const ImageU8& img, Rng& rng, int out_size) {
    if (img.width < 1 || img.height < 1) throw ValueError("augment_train: empty image");
    return apply_augment(img, sample_augment(rng, img.width, img.height), out_size);
}

Tensor preprocess_eval(const ImageU8& img, int out_size) {
    // 224 -> 256 and 448 -> 480 per protocol; S+32 keeps the rule total.
    const int frame = out_size + 32;
    ImageF f = to_float(img);
    f = resize_bilinear(f, frame, frame);
    const int off = (frame - out_size) / 2;
    f = crop(f, off, off, out_size, out_size);
    return to_tensor(f);
}

Tensor replicate_channels(const Tensor& chw1, int channels) {
    if (chw1.ndim() != 3 || chw1.dim(0) != 1)
        throw ShapeError("replicate_channels expects [1,S,S]");
    if (channels == 1) return chw1;
    std::vector<float> v;
    v.reserve(chw1.values().size() * static_cast<std::size_t>(channels));
    for (int c = 0; c < channels; ++c)
        v.insert(v.end(), chw1.values().begin(), chw1.values().end());
    return Tensor::from({channels, chw1.dim(1), chw1.dim(2)}, std::move(v));
}

} // namespace cxr

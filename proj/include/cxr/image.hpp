#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace cxr {

/// 8-bit grayscale image, row-major.
struct ImageU8 {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;

    std::uint8_t at(int x, int y) const {
        return pixels[static_cast<std::size_t>(y) * width + x];
    }
};

/// Float image in [0,1], row-major; working format of the augmentation pipeline.
struct ImageF {
    int width = 0;
    int height = 0;
    std::vector<float> pixels;

    float at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

ImageF to_float(const ImageU8& img);
ImageU8 to_u8(const ImageF& img); // clamps to [0,1] before quantizing

/// Reads any 8/16-bit gray/RGB/RGBA PNG and converts to 8-bit grayscale.
ImageU8 read_png_gray(const std::filesystem::path& path);
void write_png_gray(const std::filesystem::path& path, const ImageU8& img);
/// Interleaved RGB triplets.
void write_png_rgb(const std::filesystem::path& path, int width, int height,
                   const std::vector<std::uint8_t>& rgb);

} // namespace cxr

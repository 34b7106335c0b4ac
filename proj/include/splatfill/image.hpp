// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace splatfill {

/// Row-major RGB image, channel-interleaved, values in [0,1].
struct Image {
    int width = 0;
    int height = 0;
    std::vector<double> pixels; // width*height*3

    Image() = default;
    Image(int w, int h, double fill = 0.0) : width(w), height(h), pixels(size_t(w) * h * 3, fill) {}

    double& at(int x, int y, int c) { return pixels[(size_t(y) * width + x) * 3 + c]; }
    double at(int x, int y, int c) const { return pixels[(size_t(y) * width + x) * 3 + c]; }
    size_t pixel_count() const { return size_t(width) * height; }
    bool same_size(const Image& o) const { return width == o.width && height == o.height; }
};

/// Strictly binary mask, row-major, values in {0,1}.
struct MaskImage {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> values; // width*height

    MaskImage() = default;
    MaskImage(int w, int h, uint8_t fill = 0) : width(w), height(h), values(size_t(w) * h, fill) {}

    uint8_t& at(int x, int y) { return values[size_t(y) * width + x]; }
    uint8_t at(int x, int y) const { return values[size_t(y) * width + x]; }
    bool all_zero() const;
    bool all_one() const;
};

// 8-bit PNG: frames as RGB, masks as grayscale {0,255}. Quantization is
// round(v*255) after clamping to [0,1].
void write_png(const Image& img, const std::string& path);
void write_png(const MaskImage& mask, const std::string& path);
Image read_png(const std::string& path);
MaskImage read_png_mask(const std::string& path);

// Lossless planar float32 container: magic "RAWF", u32 width/height/channels
// (little-endian), then channel planes of row-major float32.
void write_rawf(const Image& img, const std::string& path);
Image read_rawf(const std::string& path);

} // namespace splatfill

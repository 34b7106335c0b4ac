// SPDX-License-Identifier: Apache-2.0
#include "splatfill/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

#include "splatfill/errors.hpp"

namespace splatfill {

bool MaskImage::all_zero() const {
    return std::all_of(values.begin(), values.end(), [](uint8_t v) { return v == 0; });
}

bool MaskImage::all_one() const {
    return std::all_of(values.begin(), values.end(), [](uint8_t v) { return v == 1; });
}

namespace {

uint8_t quantize(double v) {
    double c = std::clamp(v, 0.0, 1.0);
    return static_cast<uint8_t>(std::lround(c * 255.0));
}

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

void write_png_bytes(const std::string& path, int width, int height, int color_type,
                     const std::vector<uint8_t>& bytes, int bytes_per_pixel) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw DataError("cannot open for writing: " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw DataError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw DataError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError("png write failed: " + path);
    }
    png_init_io(png, fp.get());
    // Fixed settings keep output bytes reproducible.
    png_set_compression_level(png, 6);
    png_set_IHDR(png, info, width, height, 8, color_type, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(height);
    for (int y = 0; y < height; ++y) {
        rows[y] = const_cast<png_bytep>(bytes.data() + size_t(y) * width * bytes_per_pixel);
    }
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

void read_png_bytes(const std::string& path, int& width, int& height, int& channels,
                    std::vector<uint8_t>& bytes) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw DataError("cannot open for reading: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw DataError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw DataError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("png read failed: " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    width = png_get_image_width(png, info);
    height = png_get_image_height(png, info);
    png_byte color_type = png_get_color_type(png, info);
    png_byte bit_depth = png_get_bit_depth(png, info);

    if (bit_depth == 16) png_set_strip_16(png);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    channels = png_get_channels(png, info);
    size_t rowbytes = png_get_rowbytes(png, info);
    bytes.resize(rowbytes * height);
    std::vector<png_bytep> rows(height);
    for (int y = 0; y < height; ++y) rows[y] = bytes.data() + size_t(y) * rowbytes;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
}

} // namespace

void write_png(const Image& img, const std::string& path) {
    std::vector<uint8_t> bytes(img.pixel_count() * 3);
    for (size_t i = 0; i < bytes.size(); ++i) bytes[i] = quantize(img.pixels[i]);
    write_png_bytes(path, img.width, img.height, PNG_COLOR_TYPE_RGB, bytes, 3);
}

void write_png(const MaskImage& mask, const std::string& path) {
    std::vector<uint8_t> bytes(mask.values.size());
    for (size_t i = 0; i < bytes.size(); ++i) bytes[i] = mask.values[i] ? 255 : 0;
    write_png_bytes(path, mask.width, mask.height, PNG_COLOR_TYPE_GRAY, bytes, 1);
}

Image read_png(const std::string& path) {
    int w, h, ch;
    std::vector<uint8_t> bytes;
    read_png_bytes(path, w, h, ch, bytes);
    Image img(w, h);
    for (size_t p = 0; p < img.pixel_count(); ++p) {
        for (int c = 0; c < 3; ++c) {
            uint8_t v = ch >= 3 ? bytes[p * ch + c] : bytes[p * ch];
            img.pixels[p * 3 + c] = v / 255.0;
        }
    }
    return img;
}

MaskImage read_png_mask(const std::string& path) {
    int w, h, ch;
    std::vector<uint8_t> bytes;
    read_png_bytes(path, w, h, ch, bytes);
    MaskImage mask(w, h);
    for (size_t p = 0; p < mask.values.size(); ++p) {
        mask.values[p] = bytes[p * ch] >= 128 ? 1 : 0;
    }
    return mask;
}

void write_rawf(const Image& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path);
    const char magic[4] = {'R', 'A', 'W', 'F'};
    uint32_t w = img.width, h = img.height, c = 3;
    out.write(magic, 4);
    out.write(reinterpret_cast<const char*>(&w), 4);
    out.write(reinterpret_cast<const char*>(&h), 4);
    out.write(reinterpret_cast<const char*>(&c), 4);
    std::vector<float> plane(img.pixel_count());
    for (uint32_t ch = 0; ch < c; ++ch) {
        for (size_t p = 0; p < img.pixel_count(); ++p) {
            plane[p] = static_cast<float>(img.pixels[p * 3 + ch]);
        }
        out.write(reinterpret_cast<const char*>(plane.data()), plane.size() * sizeof(float));
    }
    if (!out) throw DataError("write failed: " + path);
}

Image read_rawf(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open for reading: " + path);
    char magic[4];
    uint32_t w = 0, h = 0, c = 0;
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(&w), 4);
    in.read(reinterpret_cast<char*>(&h), 4);
    in.read(reinterpret_cast<char*>(&c), 4);
    if (!in || std::memcmp(magic, "RAWF", 4) != 0) throw DataError("bad rawf header: " + path);
    if (c != 3) throw DataError("rawf: expected 3 channels: " + path);
    Image img(static_cast<int>(w), static_cast<int>(h));
    std::vector<float> plane(img.pixel_count());
    for (uint32_t ch = 0; ch < c; ++ch) {
        in.read(reinterpret_cast<char*>(plane.data()), plane.size() * sizeof(float));
        if (!in) throw DataError("rawf truncated: " + path);
        for (size_t p = 0; p < img.pixel_count(); ++p) img.pixels[p * 3 + ch] = plane[p];
    }
    return img;
}

} // namespace splatfill

#pragma once

#include <filesystem>
#include <string>

#include "personalize/tensor.hpp"

namespace personalize {

// CHW image with values in [0,1]. On disk images are binary PPM (P6, RGB)
// and masks are binary PGM (P5, single channel, 0 = background, 255 = subject).
struct Image {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<double> data;  // CHW

    static Image zeros(int c, int h, int w) {
        Image im;
        im.channels = c;
        im.height = h;
        im.width = w;
        im.data.assign(static_cast<size_t>(c) * h * w, 0.0);
        return im;
    }
    double& at(int c, int y, int x) {
        return data[(static_cast<size_t>(c) * height + y) * width + x];
    }
    double at(int c, int y, int x) const {
        return data[(static_cast<size_t>(c) * height + y) * width + x];
    }
    int64_t size() const { return static_cast<int64_t>(data.size()); }

    Tensor to_tensor() const { return Tensor({{channels, height, width}}, data); }
    static Image from_tensor(const Tensor& t) {
        if (t.ndim() != 3) throw ShapeError("Image::from_tensor: expected (C,H,W) tensor");
        Image im;
        im.channels = t.shape[0];
        im.height = t.shape[1];
        im.width = t.shape[2];
        im.data = t.data;
        return im;
    }
};

// Quantizes [0,1] doubles to u8 with round-half-up; values are clamped first.
uint8_t quantize8(double v);

void write_ppm(const std::filesystem::path& path, const Image& image);
void write_pgm(const std::filesystem::path& path, const Image& gray);
void write_mask_pgm(const std::filesystem::path& path, const Mask& mask);

// Reads P5/P6, returning channels=1 or 3 with data scaled to [0,1].
Image read_image(const std::filesystem::path& path);

// Loads a mask file and checks it is strictly binary (only 0 and 255 bytes).
Mask read_mask(const std::filesystem::path& path);

// Mean-pools each channel to (out_h, out_w); used by the stub embedders.
Image average_pool(const Image& image, int out_h, int out_w);

}  // namespace personalize

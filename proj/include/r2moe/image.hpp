#pragma once

#include "r2moe/numerics.hpp"

#include <filesystem>

namespace r2moe {

/// HWC image with values nominally in [-1, 1].
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    Vec data;

    Image() = default;
    Image(int h, int w, int c) : height(h), width(w), channels(c), data(Vec::Zero(Eigen::Index{h} * w * c)) {}

    double& at(int y, int x, int c) { return data[(Eigen::Index{y} * width + x) * channels + c]; }
    double at(int y, int x, int c) const { return data[(Eigen::Index{y} * width + x) * channels + c]; }

    bool operator==(const Image&) const = default;
};

/// Image -> (h/p * w/p) x (p*p*c) patch tokens, row-major over the patch grid.
Mat patchify(const Image& img, int patch);
Image unpatchify(const Mat& patches, int height, int width, int channels, int patch);

void write_ppm(const std::filesystem::path& path, const Image& img);
/// Binary mask (or any [0,1] grayscale) as an 8-bit PGM.
void write_pgm(const std::filesystem::path& path, const Mat& gray);

}  // namespace r2moe

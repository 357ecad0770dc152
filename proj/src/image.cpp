#include "r2moe/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace r2moe {

Mat patchify(const Image& img, int patch)
{
    if (patch <= 0 || img.height % patch != 0 || img.width % patch != 0)
        throw ShapeError("patchify: image size not divisible by patch size");
    const int gh = img.height / patch;
    const int gw = img.width / patch;
    Mat out(gh * gw, patch * patch * img.channels);
    for (int gy = 0; gy < gh; ++gy)
        for (int gx = 0; gx < gw; ++gx) {
            Eigen::Index col = 0;
            for (int py = 0; py < patch; ++py)
                for (int px = 0; px < patch; ++px)
                    for (int c = 0; c < img.channels; ++c)
                        out(gy * gw + gx, col++) = img.at(gy * patch + py, gx * patch + px, c);
        }
    return out;
}

Image unpatchify(const Mat& patches, int height, int width, int channels, int patch)
{
    const int gh = height / patch;
    const int gw = width / patch;
    if (patches.rows() != Eigen::Index{gh} * gw || patches.cols() != Eigen::Index{patch} * patch * channels)
        throw ShapeError("unpatchify: patch matrix shape mismatch");
    Image img(height, width, channels);
    for (int gy = 0; gy < gh; ++gy)
        for (int gx = 0; gx < gw; ++gx) {
            Eigen::Index col = 0;
            for (int py = 0; py < patch; ++py)
                for (int px = 0; px < patch; ++px)
                    for (int c = 0; c < channels; ++c)
                        img.at(gy * patch + py, gx * patch + px, c) = patches(gy * gw + gx, col++);
        }
    return img;
}

namespace {

unsigned char to_byte(double v01)
{
    return static_cast<unsigned char>(std::lround(std::clamp(v01, 0.0, 1.0) * 255.0));
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const Image& img)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw std::runtime_error("cannot write " + path.string());
    out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) {
                const double v = img.at(y, x, std::min(c, img.channels - 1));
                const unsigned char b = to_byte(0.5 * (v + 1.0));
                out.put(static_cast<char>(b));
            }
}

void write_pgm(const std::filesystem::path& path, const Mat& gray)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw std::runtime_error("cannot write " + path.string());
    out << "P5\n" << gray.cols() << ' ' << gray.rows() << "\n255\n";
    for (Eigen::Index y = 0; y < gray.rows(); ++y)
        for (Eigen::Index x = 0; x < gray.cols(); ++x)
            out.put(static_cast<char>(to_byte(gray(y, x))));
}

}  // namespace r2moe

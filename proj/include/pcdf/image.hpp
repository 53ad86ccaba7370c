#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace pcdf {

/// Planar raster, values in [0,1], layout [channel][row][col].
/// Disk format is lossless 8-bit (PPM for 3-channel, PGM for 1-channel);
/// quantization happens only at save time.
struct Raster {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<double> data;

    Raster() = default;
    Raster(int w, int h, int c) : width(w), height(h), channels(c),
        data(static_cast<size_t>(w) * h * c, 0.0) {}

    double& at(int c, int y, int x) {
        return data[(static_cast<size_t>(c) * height + y) * width + x];
    }
    double at(int c, int y, int x) const {
        return data[(static_cast<size_t>(c) * height + y) * width + x];
    }

    /// 8-bit view in file order (row-major, channels interleaved).
    std::vector<uint8_t> quantized() const;
};

void save_raster(const Raster& img, const std::filesystem::path& path);
Raster load_raster(const std::filesystem::path& path);

/// Peak signal-to-noise ratio in dB between two equal-shape rasters
/// (peak = 1.0). Identical images return +inf.
double psnr(const Raster& a, const Raster& b);

} // namespace pcdf

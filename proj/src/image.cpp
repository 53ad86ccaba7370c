#include "pcdf/image.hpp"

#include "pcdf/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace pcdf {

std::vector<uint8_t> Raster::quantized() const {
    std::vector<uint8_t> out(data.size());
    size_t i = 0;
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            for (int c = 0; c < channels; ++c) {
                double v = at(c, y, x);
                v = std::clamp(v, 0.0, 1.0);
                out[i++] = static_cast<uint8_t>(std::lround(v * 255.0));
            }
    return out;
}

void save_raster(const Raster& img, const std::filesystem::path& path) {
    if (img.channels != 1 && img.channels != 3)
        throw IoError("save_raster: unsupported channel count " + std::to_string(img.channels));
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("save_raster: cannot open " + path.string());
    f << (img.channels == 3 ? "P6" : "P5") << "\n"
      << img.width << " " << img.height << "\n255\n";
    auto bytes = img.quantized();
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("save_raster: write failed for " + path.string());
}

namespace {

int read_pnm_token(std::ifstream& f, const std::filesystem::path& path) {
    // skips whitespace and '#' comments per the PNM grammar
    int c = f.get();
    while (c == '#' || std::isspace(c)) {
        if (c == '#') {
            while (c != '\n' && c != EOF) c = f.get();
        }
        c = f.get();
    }
    int value = 0;
    bool any = false;
    while (std::isdigit(c)) {
        value = value * 10 + (c - '0');
        any = true;
        c = f.get();
    }
    if (!any) throw IoError("load_raster: malformed header in " + path.string());
    return value;
}

} // namespace

Raster load_raster(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("load_raster: cannot open " + path.string());
    char m0 = static_cast<char>(f.get());
    char m1 = static_cast<char>(f.get());
    int channels;
    if (m0 == 'P' && m1 == '6') channels = 3;
    else if (m0 == 'P' && m1 == '5') channels = 1;
    else throw IoError("load_raster: not a P5/P6 file: " + path.string());
    int w = read_pnm_token(f, path);
    int h = read_pnm_token(f, path);
    int maxval = read_pnm_token(f, path);
    if (maxval != 255) throw IoError("load_raster: expected maxval 255 in " + path.string());
    std::vector<uint8_t> bytes(static_cast<size_t>(w) * h * channels);
    f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (f.gcount() != static_cast<std::streamsize>(bytes.size()))
        throw IoError("load_raster: truncated pixel data in " + path.string());
    Raster img(w, h, channels);
    size_t i = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < channels; ++c)
                img.at(c, y, x) = bytes[i++] / 255.0;
    return img;
}

double psnr(const Raster& a, const Raster& b) {
    if (a.data.size() != b.data.size())
        throw ValidationError("psnr: shape mismatch");
    double mse = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        double d = a.data[i] - b.data[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.data.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

} // namespace pcdf

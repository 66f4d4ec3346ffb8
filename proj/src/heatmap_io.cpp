#include <algorithm>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "dmfuse/attribution.hpp"

namespace dmfuse {

Raster heatmap_to_gray(const Heatmap& hm) {
    Raster out;
    out.channels = 1;
    out.height = hm.values.shape[0];
    out.width = hm.values.shape[1];
    out.data.resize(out.height * out.width);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        const double v = std::clamp(hm.values[i], 0.0, 1.0);
        out.data[i] = (std::uint8_t)std::lround(v * 255.0);
    }
    return out;
}

namespace {
// blue -> green -> red ramp
void ramp(double v, double rgb[3]) {
    rgb[0] = std::clamp(1.5 - std::fabs(4.0 * v - 3.0), 0.0, 1.0);
    rgb[1] = std::clamp(1.5 - std::fabs(4.0 * v - 2.0), 0.0, 1.0);
    rgb[2] = std::clamp(1.5 - std::fabs(4.0 * v - 1.0), 0.0, 1.0);
}
}  // namespace

Raster heatmap_overlay(const Tensor<float>& image_planar, const Heatmap& hm) {
    if (image_planar.rank() != 3)
        throw std::invalid_argument("heatmap_overlay: image must be [C,H,W]");
    const std::size_t c = image_planar.shape[0];
    const std::size_t h = image_planar.shape[1], w = image_planar.shape[2];
    if (hm.values.shape[0] != h || hm.values.shape[1] != w)
        throw std::invalid_argument("heatmap_overlay: heatmap/image size mismatch");
    Raster out;
    out.channels = 3;
    out.height = h;
    out.width = w;
    out.data.resize(h * w * 3);
    for (std::size_t i = 0; i < h * w; ++i) {
        double rgb[3];
        ramp(std::clamp(hm.values[i], 0.0, 1.0), rgb);
        for (std::size_t ch = 0; ch < 3; ++ch) {
            const double base = image_planar.values[(c == 3 ? ch : 0) * h * w + i];
            const double mixed = 0.6 * std::clamp((double)base, 0.0, 1.0) + 0.4 * rgb[ch];
            out.data[i * 3 + ch] = (std::uint8_t)std::lround(std::clamp(mixed, 0.0, 1.0) * 255.0);
        }
    }
    return out;
}

void save_insertion_csv(const InsertionCurve& curve, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << "fraction,probability\n";
    char buf[80];
    for (std::size_t i = 0; i < curve.fraction.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.9g,%.9g\n", curve.fraction[i], curve.probability[i]);
        os << buf;
    }
}

}  // namespace dmfuse

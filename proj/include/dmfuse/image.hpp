#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dmfuse/tensor.hpp"

namespace dmfuse {

// 8-bit raster, interleaved row-major (h, w, c). channels is 1 or 3.
struct Raster {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> data;

    std::uint8_t at(std::size_t y, std::size_t x, std::size_t c = 0) const {
        return data[(y * width + x) * channels + c];
    }
};

// Reads 8-bit PNG (via libpng), binary PGM (P5) or PPM (P6), dispatching on
// file signature.
Raster read_raster(const std::string& path);

void write_pgm(const std::string& path, const Raster& img);
void write_ppm(const std::string& path, const Raster& img);
void write_png(const std::string& path, const Raster& img);

// planar [C,H,W] floats in [0,1] <-> interleaved 8-bit
Tensor<float> raster_to_planar(const Raster& img);
Raster planar_to_raster(const Tensor<float>& planar);

}  // namespace dmfuse

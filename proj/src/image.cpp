#include "dmfuse/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace dmfuse {

namespace {

int pnm_token(std::istream& is) {
    // skips whitespace and '#' comments, returns next integer
    for (;;) {
        int c = is.peek();
        if (c == '#') {
            std::string line;
            std::getline(is, line);
        } else if (std::isspace(c)) {
            is.get();
        } else {
            break;
        }
    }
    int v;
    if (!(is >> v)) throw std::runtime_error("malformed PNM header");
    return v;
}

Raster read_pnm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    char magic[2];
    is.read(magic, 2);
    if (!is || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6'))
        throw std::runtime_error("not a binary PGM/PPM: " + path);
    Raster img;
    img.channels = magic[1] == '5' ? 1 : 3;
    img.width = (std::size_t)pnm_token(is);
    img.height = (std::size_t)pnm_token(is);
    const int maxval = pnm_token(is);
    if (maxval <= 0 || maxval > 255)
        throw std::runtime_error("only 8-bit PNM supported: " + path);
    is.get();  // single whitespace after maxval
    img.data.resize(img.width * img.height * img.channels);
    is.read(reinterpret_cast<char*>(img.data.data()), (std::streamsize)img.data.size());
    if (!is) throw std::runtime_error("truncated PNM: " + path);
    return img;
}

Raster read_png_file(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw std::runtime_error("cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw std::runtime_error("libpng failed reading " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    Raster img;
    img.width = png_get_image_width(png, info);
    img.height = png_get_image_height(png, info);
    img.channels = png_get_channels(png, info);
    if (img.channels != 1 && img.channels != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw std::runtime_error("unsupported PNG channel count in " + path);
    }
    img.data.resize(img.width * img.height * img.channels);
    std::vector<png_bytep> rows(img.height);
    for (std::size_t y = 0; y < img.height; ++y)
        rows[y] = img.data.data() + y * img.width * img.channels;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

}  // namespace

Raster read_raster(const std::string& path) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) throw std::runtime_error("cannot open " + path);
    unsigned char sig[8] = {0};
    probe.read(reinterpret_cast<char*>(sig), 8);
    probe.close();
    if (sig[0] == 0x89 && sig[1] == 'P' && sig[2] == 'N' && sig[3] == 'G')
        return read_png_file(path);
    if (sig[0] == 'P' && (sig[1] == '5' || sig[1] == '6')) return read_pnm(path);
    throw std::runtime_error("unrecognized raster format: " + path);
}

void write_pgm(const std::string& path, const Raster& img) {
    if (img.channels != 1) throw std::invalid_argument("write_pgm: need 1 channel");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << "P5\n" << img.width << " " << img.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.data.data()), (std::streamsize)img.data.size());
    if (!os) throw std::runtime_error("write failed: " + path);
}

void write_ppm(const std::string& path, const Raster& img) {
    if (img.channels != 3) throw std::invalid_argument("write_ppm: need 3 channels");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << "P6\n" << img.width << " " << img.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.data.data()), (std::streamsize)img.data.size());
    if (!os) throw std::runtime_error("write failed: " + path);
}

void write_png(const std::string& path, const Raster& img) {
    if (img.channels != 1 && img.channels != 3)
        throw std::invalid_argument("write_png: need 1 or 3 channels");
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw std::runtime_error("cannot write " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw std::runtime_error("libpng failed writing " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, (png_uint_32)img.width, (png_uint_32)img.height, 8,
                 img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(img.height);
    std::vector<std::uint8_t> data = img.data;
    for (std::size_t y = 0; y < img.height; ++y)
        rows[y] = data.data() + y * img.width * img.channels;
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

Tensor<float> raster_to_planar(const Raster& img) {
    Tensor<float> out({img.channels, img.height, img.width});
    for (std::size_t c = 0; c < img.channels; ++c)
        for (std::size_t y = 0; y < img.height; ++y)
            for (std::size_t x = 0; x < img.width; ++x)
                out.values[(c * img.height + y) * img.width + x] =
                    (float)img.at(y, x, c) / 255.0f;
    return out;
}

Raster planar_to_raster(const Tensor<float>& planar) {
    if (planar.rank() != 3) throw std::invalid_argument("planar_to_raster: need [C,H,W]");
    Raster img;
    img.channels = planar.shape[0];
    img.height = planar.shape[1];
    img.width = planar.shape[2];
    img.data.resize(img.channels * img.height * img.width);
    for (std::size_t c = 0; c < img.channels; ++c)
        for (std::size_t y = 0; y < img.height; ++y)
            for (std::size_t x = 0; x < img.width; ++x) {
                float v = planar.values[(c * img.height + y) * img.width + x];
                v = std::clamp(v, 0.0f, 1.0f);
                img.data[(y * img.width + x) * img.channels + c] =
                    (std::uint8_t)std::lround(v * 255.0f);
            }
    return img;
}

}  // namespace dmfuse

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>

#include "dmfuse/tensor.hpp"

namespace dmfuse {

// Named parameter map. std::map keeps iteration sorted by name, which the
// on-disk format and optimizer state both rely on.
template <class T>
using ParamSet = std::map<std::string, Tensor<T>>;

namespace detail {

template <class U>
void write_le(std::ostream& os, U v) {
    unsigned char buf[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = (unsigned char)((std::uint64_t)v >> (8 * i));
    os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <class U>
U read_le(std::istream& is) {
    unsigned char buf[sizeof(U)];
    is.read(reinterpret_cast<char*>(buf), sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= (std::uint64_t)buf[i] << (8 * i);
    return (U)v;
}

inline void write_f32(std::ostream& os, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    write_le<std::uint32_t>(os, bits);
}

inline float read_f32(std::istream& is) {
    std::uint32_t bits = read_le<std::uint32_t>(is);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

}  // namespace detail

// Flat binary checkpoint: magic "DSM1", u64 count, then per parameter in
// sorted-name order: u64 name length, name bytes, u64 rank, extents as i64 LE,
// values as f32 LE.
template <class T>
void save_params(const ParamSet<T>& params, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_params: cannot open " + path);
    os.write("DSM1", 4);
    detail::write_le<std::uint64_t>(os, params.size());
    for (const auto& [name, tensor] : params) {
        detail::write_le<std::uint64_t>(os, name.size());
        os.write(name.data(), (std::streamsize)name.size());
        detail::write_le<std::uint64_t>(os, tensor.rank());
        for (std::size_t e : tensor.shape) detail::write_le<std::int64_t>(os, (std::int64_t)e);
        for (T v : tensor.values) detail::write_f32(os, (float)v);
    }
    if (!os) throw std::runtime_error("save_params: write failed for " + path);
}

template <class T>
ParamSet<T> load_params(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_params: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "DSM1", 4) != 0)
        throw std::runtime_error("load_params: bad magic in " + path);
    const std::uint64_t count = detail::read_le<std::uint64_t>(is);
    ParamSet<T> params;
    for (std::uint64_t p = 0; p < count; ++p) {
        const std::uint64_t name_len = detail::read_le<std::uint64_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), (std::streamsize)name_len);
        const std::uint64_t rank = detail::read_le<std::uint64_t>(is);
        std::vector<std::size_t> shape(rank);
        for (auto& e : shape) e = (std::size_t)detail::read_le<std::int64_t>(is);
        Tensor<T> t(shape);
        for (auto& v : t.values) v = (T)detail::read_f32(is);
        if (!is) throw std::runtime_error("load_params: truncated file " + path);
        if (!params.emplace(std::move(name), std::move(t)).second)
            throw std::runtime_error("load_params: duplicate parameter name in " + path);
    }
    return params;
}

}  // namespace dmfuse

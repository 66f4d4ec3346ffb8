#pragma once

#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace dmfuse {

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

// Dense row-major n-d array. Gradients live on tape nodes, not here.
template <class T>
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<T> values;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> s, T fill = T(0))
        : shape(std::move(s)), values(shape_numel(shape), fill) {}

    Tensor(std::vector<std::size_t> s, std::vector<T> v)
        : shape(std::move(s)), values(std::move(v)) {
        if (shape_numel(shape) != values.size())
            throw std::invalid_argument("Tensor: shape " + shape_str(shape) +
                                        " does not match " + std::to_string(values.size()) +
                                        " values");
        for (std::size_t e : shape)
            if (e == 0) throw std::invalid_argument("Tensor: zero extent in shape");
    }

    static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

    std::size_t size() const { return values.size(); }
    std::size_t rank() const { return shape.size(); }

    T& operator[](std::size_t i) { return values[i]; }
    const T& operator[](std::size_t i) const { return values[i]; }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.values.reserve(values.size());
        for (T v : values) out.values.push_back(static_cast<U>(v));
        return out;
    }
};

}  // namespace dmfuse

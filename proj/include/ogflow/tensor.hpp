#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ogflow/errors.hpp"

namespace ogflow {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

/// Dense row-major tensor, rank <= 4. The single data carrier used by the
/// autodiff graph, the geometry kernels and all file formats.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> v;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), v(shape_numel(shape), T(0)) {}
    Tensor(Shape s, std::vector<T> data) : shape(std::move(s)), v(std::move(data)) {
        if (v.size() != shape_numel(shape))
            throw ShapeError("tensor data length " + std::to_string(v.size()) +
                             " does not match shape " + shape_str(shape));
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, T value) {
        Tensor t(std::move(s));
        std::fill(t.v.begin(), t.v.end(), value);
        return t;
    }
    static Tensor scalar(T value) {
        Tensor t;
        t.v.assign(1, value);
        return t;
    }

    std::size_t numel() const { return v.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape[i]; }
    bool is_scalar() const { return numel() == 1 && rank() == 0; }

    T& operator[](std::size_t i) { return v[i]; }
    const T& operator[](std::size_t i) const { return v[i]; }

    // Row-major accessors for the common ranks.
    T& at2(std::size_t i, std::size_t j) { return v[i * shape[1] + j]; }
    const T& at2(std::size_t i, std::size_t j) const { return v[i * shape[1] + j]; }
    T& at3(std::size_t i, std::size_t j, std::size_t k) {
        return v[(i * shape[1] + j) * shape[2] + k];
    }
    const T& at3(std::size_t i, std::size_t j, std::size_t k) const {
        return v[(i * shape[1] + j) * shape[2] + k];
    }

    bool all_finite() const {
        for (const T& x : v)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.v.resize(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
        return out;
    }

    bool operator==(const Tensor& o) const { return shape == o.shape && v == o.v; }
};

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* where) {
    if (a.shape != b.shape)
        throw ShapeError(std::string(where) + ": shape mismatch " + shape_str(a.shape) +
                         " vs " + shape_str(b.shape));
}

} // namespace ogflow

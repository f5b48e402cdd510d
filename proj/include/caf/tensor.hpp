#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "caf/rng.hpp"

namespace caf {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ')';
    return os.str();
}

// Dense row-major tensor. Plain value type: copyable, movable, no view
// semantics. All neural-net data in this library is NCHW.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(static_cast<std::size_t>(shape_numel(shape)), T(0)) {}
    Tensor(Shape s, T fill) : shape(std::move(s)), data(static_cast<std::size_t>(shape_numel(shape)), fill) {}
    Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
            throw std::invalid_argument("tensor data size does not match shape " + shape_str(shape));
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    std::int64_t dim(std::size_t i) const { return shape.at(i); }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    T& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    // NCHW accessor.
    T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
        return data[static_cast<std::size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
    }
    const T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
        return data[static_cast<std::size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
    }
    // 2-d accessor.
    T& at(std::int64_t i, std::int64_t j) { return data[static_cast<std::size_t>(i * shape[1] + j)]; }
    const T& at(std::int64_t i, std::int64_t j) const { return data[static_cast<std::size_t>(i * shape[1] + j)]; }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, T v) { return Tensor(std::move(s), v); }

    static Tensor randn(Shape s, Rng& rng, T stddev = T(1)) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = static_cast<T>(rng.normal(0.0, static_cast<double>(stddev)));
        return t;
    }
    static Tensor rand_uniform(Shape s, Rng& rng, T lo = T(0), T hi = T(1)) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = static_cast<T>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
        return t;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }

    bool all_finite() const {
        for (const T& v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    T min() const { return *std::min_element(data.begin(), data.end()); }
    T max() const { return *std::max_element(data.begin(), data.end()); }
    double sum() const {
        double s = 0.0;
        for (const T& v : data) s += static_cast<double>(v);
        return s;
    }
    double mean() const { return data.empty() ? 0.0 : sum() / static_cast<double>(data.size()); }

    Tensor& operator+=(const Tensor& o) {
        check_same(o);
        for (std::size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
        return *this;
    }
    Tensor& operator-=(const Tensor& o) {
        check_same(o);
        for (std::size_t i = 0; i < data.size(); ++i) data[i] -= o.data[i];
        return *this;
    }
    Tensor& operator*=(T s) {
        for (auto& v : data) v *= s;
        return *this;
    }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    void check_same(const Tensor& o) const {
        if (!same_shape(o))
            throw std::invalid_argument("tensor shape mismatch: " + shape_str(shape) + " vs " + shape_str(o.shape));
    }
};

template <typename T>
Tensor<T> operator+(Tensor<T> a, const Tensor<T>& b) { return a += b; }
template <typename T>
Tensor<T> operator-(Tensor<T> a, const Tensor<T>& b) { return a -= b; }

// max |a - b| over all elements.
template <typename T>
double linf_distance(const Tensor<T>& a, const Tensor<T>& b) {
    a.check_same(b);
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
    return m;
}

template <typename T>
void clamp_(Tensor<T>& t, T lo, T hi) {
    for (auto& v : t.data) v = std::min(hi, std::max(lo, v));
}

// Elementwise clip of `t` into [ref - eps, ref + eps].
template <typename T>
void clip_to_ball_(Tensor<T>& t, const Tensor<T>& ref, T eps) {
    t.check_same(ref);
    for (std::size_t i = 0; i < t.data.size(); ++i)
        t.data[i] = std::min(ref.data[i] + eps, std::max(ref.data[i] - eps, t.data[i]));
}

// sign with sign(0) = 0.
template <typename T>
Tensor<T> sign(const Tensor<T>& t) {
    Tensor<T> out(t.shape);
    for (std::size_t i = 0; i < t.data.size(); ++i)
        out.data[i] = t.data[i] > T(0) ? T(1) : (t.data[i] < T(0) ? T(-1) : T(0));
    return out;
}

} // namespace caf

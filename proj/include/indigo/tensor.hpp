#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace indigo {

/// Dense row-major tensor. Everything in this project is rank 1 or 2;
/// rank is kept generic only so checkpoint I/O stays shape-agnostic.
template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape), T(0)) {}
    Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<std::size_t>(count(shape)) != data.size())
            throw std::invalid_argument("tensor: data size does not match shape");
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor scalar(T v) {
        Tensor t({1});
        t.data[0] = v;
        return t;
    }
    static Tensor row_vector(std::vector<T> d) {
        const int n = static_cast<int>(d.size());
        return Tensor({1, n}, std::move(d));
    }

    static long count(const std::vector<int>& s) {
        long n = 1;
        for (int d : s) {
            if (d <= 0) throw std::invalid_argument("tensor: nonpositive dimension");
            n *= d;
        }
        return n;
    }

    long numel() const { return static_cast<long>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int rows() const { return shape.at(0); }
    int cols() const { return ndim() == 1 ? 1 : shape.at(1); }

    T& operator()(int i, int j) { return data[static_cast<std::size_t>(i) * cols() + j]; }
    T operator()(int i, int j) const { return data[static_cast<std::size_t>(i) * cols() + j]; }
    T* row(int i) { return data.data() + static_cast<std::size_t>(i) * cols(); }
    const T* row(int i) const { return data.data() + static_cast<std::size_t>(i) * cols(); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

inline std::string shape_string(const std::vector<int>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

template <typename T>
void check_shape(const Tensor<T>& t, const std::vector<int>& want, const char* what) {
    if (t.shape != want)
        throw std::invalid_argument(std::string(what) + ": expected shape " + shape_string(want) +
                                    ", got " + shape_string(t.shape));
}

} // namespace indigo

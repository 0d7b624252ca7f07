// Dense row-major matrix used throughout the library.
//
// Everything in eegtext is expressed as 2-D arrays: sequences are (positions x
// features), weights are (inputs x outputs). Heavy products are delegated to
// Eigen through zero-copy maps.

#pragma once

#include <Eigen/Core>

#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace eegtext {

template <typename T>
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<T> data;

    Matrix() = default;
    Matrix(int r, int c, T fill = T(0)) : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {
        if (r < 0 || c < 0) throw std::invalid_argument("Matrix: negative shape");
    }

    T& operator()(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    const T& operator()(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    std::span<T> row(int r) { return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)}; }
    std::span<const T> row(int r) const {
        return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)};
    }

    size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    template <typename U>
    Matrix<U> cast() const {
        Matrix<U> out(rows, cols);
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }

    friend bool operator==(const Matrix& a, const Matrix& b) {
        return a.rows == b.rows && a.cols == b.cols && a.data == b.data;
    }
};

template <typename T>
using EigenRowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<EigenRowMajor<T>> as_eigen(Matrix<T>& m) {
    return {m.data.data(), m.rows, m.cols};
}

template <typename T>
Eigen::Map<const EigenRowMajor<T>> as_eigen(const Matrix<T>& m) {
    return {m.data.data(), m.rows, m.cols};
}

inline std::string shape_str(int r, int c) { return "(" + std::to_string(r) + "x" + std::to_string(c) + ")"; }

template <typename T>
void require_same_shape(const Matrix<T>& a, const Matrix<T>& b, const char* what) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_str(a.rows, a.cols) + " vs " +
                                    shape_str(b.rows, b.cols));
}

template <typename T>
bool all_finite(const Matrix<T>& m) {
    for (T v : m.data)
        if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace eegtext

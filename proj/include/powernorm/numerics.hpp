#pragma once

// Dense B x d matrices and length-d vectors with the handful of column
// reductions and broadcasts the normalization layers need.
//
// Storage is row-major with the batch along rows, so every batch statistic
// is a column reduction. All reductions accumulate sequentially in row
// order; results are therefore bit-reproducible for a given input.

#include "powernorm/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

namespace powernorm {

template <typename T>
concept Real = std::is_floating_point_v<T>;

template <Real T>
constexpr const char* precision_name() {
    if constexpr (std::is_same_v<T, double>) {
        return "f64";
    } else {
        return "f32";
    }
}

template <Real T>
class Vector {
public:
    Vector() = default;

    explicit Vector(std::size_t len, T fill = T(0)) : data_(len, fill) {
        if (len == 0) throw ShapeMismatch("Vector: length must be >= 1");
    }

    Vector(std::initializer_list<T> values) : data_(values) {
        if (data_.empty()) throw ShapeMismatch("Vector: length must be >= 1");
    }

    explicit Vector(std::vector<T> values) : data_(std::move(values)) {
        if (data_.empty()) throw ShapeMismatch("Vector: length must be >= 1");
    }

    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    const std::vector<T>& raw() const { return data_; }

    auto begin() { return data_.begin(); }
    auto end() { return data_.end(); }
    auto begin() const { return data_.begin(); }
    auto end() const { return data_.end(); }

    bool operator==(const Vector&) const = default;

private:
    std::vector<T> data_;
};

template <Real T>
class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {
        if (rows == 0 || cols == 0) {
            throw ShapeMismatch("Matrix: shape must be at least 1x1, got " +
                                std::to_string(rows) + "x" + std::to_string(cols));
        }
    }

    Matrix(std::initializer_list<std::initializer_list<T>> rows) {
        rows_ = rows.size();
        cols_ = rows_ ? rows.begin()->size() : 0;
        if (rows_ == 0 || cols_ == 0) throw ShapeMismatch("Matrix: empty initializer");
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            if (r.size() != cols_) throw ShapeMismatch("Matrix: ragged initializer");
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    const T& operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    std::span<T> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
    std::span<const T> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }

    bool same_shape(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

using MatrixD = Matrix<double>;
using VectorD = Vector<double>;

namespace detail {

inline std::string shape_str(std::size_t r, std::size_t c) {
    return std::to_string(r) + "x" + std::to_string(c);
}

template <Real T>
void require_same_shape(const Matrix<T>& a, const Matrix<T>& b, const char* what) {
    if (!a.same_shape(b)) {
        throw ShapeMismatch(std::string(what) + ": " + shape_str(a.rows(), a.cols()) +
                            " vs " + shape_str(b.rows(), b.cols()));
    }
}

template <Real T>
void require_cols(const Matrix<T>& x, const Vector<T>& v, const char* what) {
    if (x.cols() != v.size()) {
        throw ShapeMismatch(std::string(what) + ": matrix has " + std::to_string(x.cols()) +
                            " columns, vector has length " + std::to_string(v.size()));
    }
}

template <Real T>
void require_same_len(const Vector<T>& a, const Vector<T>& b, const char* what) {
    if (a.size() != b.size()) {
        throw ShapeMismatch(std::string(what) + ": lengths " + std::to_string(a.size()) +
                            " vs " + std::to_string(b.size()));
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Column reductions (batch statistics)

template <Real T>
Vector<T> col_sum(const Matrix<T>& x) {
    Vector<T> out(x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto r = x.row(i);
        for (std::size_t j = 0; j < x.cols(); ++j) out[j] += r[j];
    }
    return out;
}

template <Real T>
Vector<T> col_mean(const Matrix<T>& x) {
    Vector<T> out = col_sum(x);
    const T n = static_cast<T>(x.rows());
    for (auto& v : out) v /= n;
    return out;
}

template <Real T>
Vector<T> col_second_moment(const Matrix<T>& x) {
    Vector<T> out(x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto r = x.row(i);
        for (std::size_t j = 0; j < x.cols(); ++j) out[j] += r[j] * r[j];
    }
    const T n = static_cast<T>(x.rows());
    for (auto& v : out) v /= n;
    return out;
}

// Biased (divisor B) variance around a supplied mean.
template <Real T>
Vector<T> col_variance(const Matrix<T>& x, const Vector<T>& mean) {
    detail::require_cols(x, mean, "col_variance");
    Vector<T> out(x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto r = x.row(i);
        for (std::size_t j = 0; j < x.cols(); ++j) {
            const T c = r[j] - mean[j];
            out[j] += c * c;
        }
    }
    const T n = static_cast<T>(x.rows());
    for (auto& v : out) v /= n;
    return out;
}

// Column-wise inner products: out[j] = sum_i a[i][j] * b[i][j].
template <Real T>
Vector<T> col_dot(const Matrix<T>& a, const Matrix<T>& b) {
    detail::require_same_shape(a, b, "col_dot");
    Vector<T> out(a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto ra = a.row(i);
        auto rb = b.row(i);
        for (std::size_t j = 0; j < a.cols(); ++j) out[j] += ra[j] * rb[j];
    }
    return out;
}

template <Real T>
Vector<T> column(const Matrix<T>& x, std::size_t j) {
    Vector<T> out(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) out[i] = x(i, j);
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise matrix arithmetic

template <Real T>
Matrix<T> add(const Matrix<T>& a, const Matrix<T>& b) {
    detail::require_same_shape(a, b, "add");
    Matrix<T> out(a.rows(), a.cols());
    auto o = out.values();
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t k = 0; k < o.size(); ++k) o[k] = av[k] + bv[k];
    return out;
}

template <Real T>
Matrix<T> sub(const Matrix<T>& a, const Matrix<T>& b) {
    detail::require_same_shape(a, b, "sub");
    Matrix<T> out(a.rows(), a.cols());
    auto o = out.values();
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t k = 0; k < o.size(); ++k) o[k] = av[k] - bv[k];
    return out;
}

template <Real T>
Matrix<T> hadamard(const Matrix<T>& a, const Matrix<T>& b) {
    detail::require_same_shape(a, b, "hadamard");
    Matrix<T> out(a.rows(), a.cols());
    auto o = out.values();
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t k = 0; k < o.size(); ++k) o[k] = av[k] * bv[k];
    return out;
}

template <Real T>
Matrix<T> scale(const Matrix<T>& a, T c) {
    Matrix<T> out = a;
    for (auto& v : out.values()) v *= c;
    return out;
}

// a += c * b
template <Real T>
void axpy(Matrix<T>& a, T c, const Matrix<T>& b) {
    detail::require_same_shape(a, b, "axpy");
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t k = 0; k < av.size(); ++k) av[k] += c * bv[k];
}

template <Real T>
void add_inplace(Matrix<T>& a, const Matrix<T>& b) {
    detail::require_same_shape(a, b, "add_inplace");
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t k = 0; k < av.size(); ++k) av[k] += bv[k];
}

// ---------------------------------------------------------------------------
// Vector broadcasts over rows: y (.) X scales column j by y[j]; y + X adds y
// to every row.

template <Real T>
Matrix<T> mul_cols(const Vector<T>& y, const Matrix<T>& x) {
    detail::require_cols(x, y, "mul_cols");
    Matrix<T> out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto r = x.row(i);
        auto o = out.row(i);
        for (std::size_t j = 0; j < x.cols(); ++j) o[j] = y[j] * r[j];
    }
    return out;
}

template <Real T>
Matrix<T> div_cols(const Matrix<T>& x, const Vector<T>& y) {
    detail::require_cols(x, y, "div_cols");
    Matrix<T> out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto r = x.row(i);
        auto o = out.row(i);
        for (std::size_t j = 0; j < x.cols(); ++j) o[j] = r[j] / y[j];
    }
    return out;
}

template <Real T>
Matrix<T> add_rows(const Vector<T>& y, const Matrix<T>& x) {
    detail::require_cols(x, y, "add_rows");
    Matrix<T> out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto r = x.row(i);
        auto o = out.row(i);
        for (std::size_t j = 0; j < x.cols(); ++j) o[j] = y[j] + r[j];
    }
    return out;
}

template <Real T>
Matrix<T> sub_rows(const Matrix<T>& x, const Vector<T>& y) {
    detail::require_cols(x, y, "sub_rows");
    Matrix<T> out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto r = x.row(i);
        auto o = out.row(i);
        for (std::size_t j = 0; j < x.cols(); ++j) o[j] = r[j] - y[j];
    }
    return out;
}

// gamma (.) x + beta in one pass.
template <Real T>
Matrix<T> affine(const Vector<T>& gamma, const Matrix<T>& x, const Vector<T>& beta) {
    detail::require_cols(x, gamma, "affine");
    detail::require_cols(x, beta, "affine");
    Matrix<T> out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto r = x.row(i);
        auto o = out.row(i);
        for (std::size_t j = 0; j < x.cols(); ++j) o[j] = gamma[j] * r[j] + beta[j];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Products

template <Real T>
Matrix<T> transpose(const Matrix<T>& a) {
    Matrix<T> out(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
    return out;
}

// a (m x k) * b (k x n)
template <Real T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.cols() != b.rows()) {
        throw ShapeMismatch("matmul: " + detail::shape_str(a.rows(), a.cols()) + " * " +
                            detail::shape_str(b.rows(), b.cols()));
    }
    Matrix<T> out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto o = out.row(i);
        auto ar = a.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const T aik = ar[k];
            auto br = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) o[j] += aik * br[j];
        }
    }
    return out;
}

// a^T (k x m)^T * b (k x n) -> m x n
template <Real T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.rows() != b.rows()) {
        throw ShapeMismatch("matmul_tn: " + detail::shape_str(a.rows(), a.cols()) + "^T * " +
                            detail::shape_str(b.rows(), b.cols()));
    }
    Matrix<T> out(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k) {
        auto ar = a.row(k);
        auto br = b.row(k);
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const T aki = ar[i];
            auto o = out.row(i);
            for (std::size_t j = 0; j < b.cols(); ++j) o[j] += aki * br[j];
        }
    }
    return out;
}

// a (m x k) * b^T (n x k)^T -> m x n
template <Real T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.cols() != b.cols()) {
        throw ShapeMismatch("matmul_nt: " + detail::shape_str(a.rows(), a.cols()) + " * " +
                            detail::shape_str(b.rows(), b.cols()) + "^T");
    }
    Matrix<T> out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto ar = a.row(i);
        auto o = out.row(i);
        for (std::size_t j = 0; j < b.rows(); ++j) {
            auto br = b.row(j);
            T acc = T(0);
            for (std::size_t k = 0; k < a.cols(); ++k) acc += ar[k] * br[k];
            o[j] = acc;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Norms

template <Real T>
T dot(std::span<const T> a, std::span<const T> b) {
    if (a.size() != b.size()) throw ShapeMismatch("dot: length mismatch");
    T acc = T(0);
    for (std::size_t k = 0; k < a.size(); ++k) acc += a[k] * b[k];
    return acc;
}

template <Real T>
T norm(std::span<const T> a) {
    return std::sqrt(dot(a, a));
}

template <Real T>
T norm(const Vector<T>& v) {
    return norm<T>(v.values());
}

template <Real T>
T frobenius_norm(const Matrix<T>& a) {
    return norm<T>(a.values());
}

template <Real T>
T row_norm(const Matrix<T>& a, std::size_t i) {
    return norm<T>(a.row(i));
}

template <Real T>
Vector<T> col_norms(const Matrix<T>& a) {
    Vector<T> out = col_dot(a, a);
    for (auto& v : out) v = std::sqrt(v);
    return out;
}

template <Real T>
T max_abs(std::span<const T> a) {
    T m = T(0);
    for (T v : a) m = std::max(m, std::abs(v));
    return m;
}

template <Real T>
bool all_finite(std::span<const T> a) {
    return std::all_of(a.begin(), a.end(), [](T v) { return std::isfinite(v); });
}

template <Real T>
bool all_finite(const Matrix<T>& a) {
    return all_finite<T>(a.values());
}

template <Real T>
bool all_finite(const Vector<T>& a) {
    return all_finite<T>(a.values());
}

// ---------------------------------------------------------------------------
// Elementwise vector arithmetic

template <Real T, typename F>
Vector<T> zip_with(const Vector<T>& a, const Vector<T>& b, F&& f) {
    detail::require_same_len(a, b, "zip_with");
    Vector<T> out(a.size());
    for (std::size_t k = 0; k < a.size(); ++k) out[k] = f(a[k], b[k]);
    return out;
}

template <Real T, typename F>
Vector<T> map(const Vector<T>& a, F&& f) {
    Vector<T> out(a.size());
    for (std::size_t k = 0; k < a.size(); ++k) out[k] = f(a[k]);
    return out;
}

template <Real T>
Vector<T> add(const Vector<T>& a, const Vector<T>& b) {
    return zip_with(a, b, [](T x, T y) { return x + y; });
}

template <Real T>
Vector<T> sub(const Vector<T>& a, const Vector<T>& b) {
    return zip_with(a, b, [](T x, T y) { return x - y; });
}

template <Real T>
Vector<T> hadamard(const Vector<T>& a, const Vector<T>& b) {
    return zip_with(a, b, [](T x, T y) { return x * y; });
}

// sqrt(v + eps) elementwise; the divisor every normalization uses.
template <Real T>
Vector<T> sqrt_eps(const Vector<T>& v, T eps) {
    return map(v, [eps](T x) { return std::sqrt(x + eps); });
}

template <Real T, Real U>
Matrix<U> cast(const Matrix<T>& a) {
    Matrix<U> out(a.rows(), a.cols());
    auto o = out.values();
    auto v = a.values();
    for (std::size_t k = 0; k < v.size(); ++k) o[k] = static_cast<U>(v[k]);
    return out;
}

template <Real T, Real U>
Vector<U> cast(const Vector<T>& a) {
    Vector<U> out(a.size());
    for (std::size_t k = 0; k < a.size(); ++k) out[k] = static_cast<U>(a[k]);
    return out;
}

} // namespace powernorm

#pragma once

// Shared helpers for the test suites: seeded random inputs and a
// central-difference gradient oracle that knows nothing about the layers
// it checks.

#include "powernorm/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

namespace powernorm::testing {

inline constexpr double kFiniteDiffStep = 1e-5;
// Entries whose magnitude falls below this are compared absolutely.
inline constexpr double kGradFloor = 1e-4;

inline MatrixD random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng,
                             double mean = 0.0, double stddev = 1.0) {
    std::normal_distribution<double> dist(mean, stddev);
    MatrixD m(rows, cols);
    for (auto& v : m.values()) v = dist(rng);
    return m;
}

inline VectorD random_vector(std::size_t len, std::mt19937_64& rng, double mean = 0.0,
                             double stddev = 1.0) {
    std::normal_distribution<double> dist(mean, stddev);
    VectorD v(len);
    for (auto& x : v) x = dist(rng);
    return v;
}

inline VectorD random_positive(std::size_t len, std::mt19937_64& rng, double lo = 0.5,
                               double hi = 2.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    VectorD v(len);
    for (auto& x : v) x = dist(rng);
    return v;
}

// Central differences of a scalar function of a matrix.
inline MatrixD numeric_gradient(const std::function<double(const MatrixD&)>& f, const MatrixD& x,
                                double h = kFiniteDiffStep) {
    MatrixD g(x.rows(), x.cols());
    MatrixD probe = x;
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double orig = probe.values()[k];
        probe.values()[k] = orig + h;
        const double fp = f(probe);
        probe.values()[k] = orig - h;
        const double fm = f(probe);
        probe.values()[k] = orig;
        g.values()[k] = (fp - fm) / (2.0 * h);
    }
    return g;
}

inline VectorD numeric_gradient(const std::function<double(const VectorD&)>& f, const VectorD& x,
                                double h = kFiniteDiffStep) {
    VectorD g(x.size());
    VectorD probe = x;
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double orig = probe[k];
        probe[k] = orig + h;
        const double fp = f(probe);
        probe[k] = orig - h;
        const double fm = f(probe);
        probe[k] = orig;
        g[k] = (fp - fm) / (2.0 * h);
    }
    return g;
}

inline double relative_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), kGradFloor});
    return std::abs(analytic - numeric) / denom;
}

inline double max_relative_error(std::span<const double> analytic, std::span<const double> numeric) {
    double worst = 0;
    for (std::size_t k = 0; k < analytic.size(); ++k) {
        worst = std::max(worst, relative_error(analytic[k], numeric[k]));
    }
    return worst;
}

// Weighted sum <w, y>: a scalar loss whose gradient w.r.t. y is w.
inline double weighted_sum(const MatrixD& w, const MatrixD& y) {
    double acc = 0;
    for (std::size_t k = 0; k < y.size(); ++k) acc += w.values()[k] * y.values()[k];
    return acc;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double worst = 0;
    for (std::size_t k = 0; k < a.size(); ++k) worst = std::max(worst, std::abs(a[k] - b[k]));
    return worst;
}

} // namespace powernorm::testing

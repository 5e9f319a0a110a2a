#pragma once

#include "powernorm/normalization.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace powernorm {

struct SpectrumReport {
    std::vector<double> singular_values;  // descending
    std::vector<double> normalized;       // singular_values / singular_values[0]
    std::size_t rows = 0;
    std::size_t cols = 0;
    int sweeps = 0;
};

struct JacobiOptions {
    double tolerance = 1e-10;
    int max_sweeps = 1000;
};

// Singular values by one-sided (Hestenes) Jacobi rotations. Throws
// NumericalFailure on non-finite input, an all-zero matrix, or when the
// sweeps do not converge.
template <Real T>
SpectrumReport embedding_spectrum(const Matrix<T>& e, JacobiOptions opts = {});

// rank,sigma,sigma_normalized with rank starting at 1.
std::string spectrum_csv(const SpectrumReport& report);

struct LipschitzReport {
    double max_rel_err = 0;
    std::size_t columns_checked = 0;
    std::vector<double> lhs;  // ||dL/dX_{:,i}||^2 from pnv_backward
    std::vector<double> rhs;  // gamma_i^2 / psi_B,i^2 (||dY_i||^2 - <dY_i, X-hat_i / sqrt B>^2)
};

// Runs PN-V (eps = 0) forward/backward on x with upstream gradient dy and
// compares the per-column squared input-gradient norm against its closed
// form. The relative error of column i is |lhs - rhs| divided by
// gamma_i^2 / psi_B,i^2 * ||dY_i||^2, the magnitude of the leading term.
// Throws DegenerateColumn when some column of x is all zero.
template <Real T>
LipschitzReport lipschitz_identity_check(const Matrix<T>& x, const Matrix<T>& dy,
                                         const AffineParams<T>& p);

std::string lipschitz_report_json(const LipschitzReport& report);

struct NuBoundednessReport {
    double sup_norm = 0;
    double max_first_half = 0;
    double max_second_half = 0;
    bool monotone_tail = false;
};

// sup_t ||nu^(t)|| over the trace, and whether the running maximum stops
// growing over the second half: max over the second half may exceed the
// first-half maximum by at most plateau_rtol * sup. Needs >= 100 snapshots.
template <Real T>
NuBoundednessReport nu_boundedness_report(std::span<const Vector<T>> nu_trace,
                                          double plateau_rtol = 1e-2);

} // namespace powernorm

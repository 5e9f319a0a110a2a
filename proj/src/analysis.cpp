#include "powernorm/analysis.hpp"

#include "powernorm/instrumentation.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

namespace powernorm {

template <Real T>
SpectrumReport embedding_spectrum(const Matrix<T>& e, JacobiOptions opts) {
    if (e.empty()) throw NumericalFailure("embedding_spectrum: empty matrix");
    if (!all_finite(e)) throw NumericalFailure("embedding_spectrum: non-finite entries");

    // Work in double on a tall matrix (rows >= cols); the singular values of
    // E and E^T coincide.
    Matrix<double> u = e.rows() >= e.cols() ? cast<T, double>(e) : cast<T, double>(transpose(e));
    const std::size_t m = u.rows();
    const std::size_t n = u.cols();

    SpectrumReport report;
    report.rows = e.rows();
    report.cols = e.cols();

    bool converged = false;
    for (int sweep = 0; sweep < opts.max_sweeps && !converged; ++sweep) {
        converged = true;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double a = 0, b = 0, g = 0;
                for (std::size_t i = 0; i < m; ++i) {
                    a += u(i, p) * u(i, p);
                    b += u(i, q) * u(i, q);
                    g += u(i, p) * u(i, q);
                }
                if (g == 0.0 || std::abs(g) <= opts.tolerance * std::sqrt(a * b)) continue;
                converged = false;
                const double zeta = (b - a) / (2.0 * g);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double up = u(i, p);
                    const double uq = u(i, q);
                    u(i, p) = c * up - s * uq;
                    u(i, q) = s * up + c * uq;
                }
            }
        }
        report.sweeps = sweep + 1;
    }
    if (!converged) {
        throw NumericalFailure("embedding_spectrum: no convergence after " +
                               std::to_string(opts.max_sweeps) + " sweeps");
    }

    report.singular_values.resize(n);
    for (std::size_t j = 0; j < n; ++j) {
        double acc = 0;
        for (std::size_t i = 0; i < m; ++i) acc += u(i, j) * u(i, j);
        report.singular_values[j] = std::sqrt(acc);
    }
    std::sort(report.singular_values.begin(), report.singular_values.end(), std::greater<>());
    const double top = report.singular_values.front();
    if (!(top > 0.0)) throw NumericalFailure("embedding_spectrum: zero matrix");
    report.normalized.reserve(n);
    for (double s : report.singular_values) report.normalized.push_back(s / top);
    report.normalized.front() = 1.0;
    return report;
}

std::string spectrum_csv(const SpectrumReport& report) {
    std::string out = "rank,sigma,sigma_normalized\n";
    for (std::size_t k = 0; k < report.singular_values.size(); ++k) {
        out += std::to_string(k + 1) + "," + format_number(report.singular_values[k]) + "," +
               format_number(report.normalized[k]) + "\n";
    }
    return out;
}

template <Real T>
LipschitzReport lipschitz_identity_check(const Matrix<T>& x, const Matrix<T>& dy,
                                         const AffineParams<T>& p) {
    detail::require_same_shape(x, dy, "lipschitz_identity_check");
    const std::size_t B = x.rows();
    const std::size_t d = x.cols();

    // Closed form first, straight from the raw inputs.
    LipschitzReport report;
    report.rhs.resize(d);
    std::vector<double> scale(d);
    for (std::size_t i = 0; i < d; ++i) {
        double psi2 = 0;
        for (std::size_t r = 0; r < B; ++r) psi2 += double(x(r, i)) * double(x(r, i));
        psi2 /= static_cast<double>(B);
        if (psi2 == 0.0) {
            throw DegenerateColumn("lipschitz_identity_check: column " + std::to_string(i) + " is zero");
        }
        const double psi = std::sqrt(psi2);
        double dy2 = 0;
        double inner = 0;
        for (std::size_t r = 0; r < B; ++r) {
            dy2 += double(dy(r, i)) * double(dy(r, i));
            inner += double(dy(r, i)) * (double(x(r, i)) / psi) / std::sqrt(static_cast<double>(B));
        }
        const double g2 = double(p.gamma[i]) * double(p.gamma[i]);
        report.rhs[i] = g2 / psi2 * (dy2 - inner * inner);
        scale[i] = g2 / psi2 * dy2;
    }

    // Then the layer's own backward.
    auto fwd = pnv_forward(x, p, T(0));
    const auto bwd = pnv_backward(dy, fwd.cache);
    report.lhs.resize(d);
    for (std::size_t i = 0; i < d; ++i) {
        double acc = 0;
        for (std::size_t r = 0; r < B; ++r) acc += double(bwd.dx(r, i)) * double(bwd.dx(r, i));
        report.lhs[i] = acc;
        const double denom = std::max(scale[i], std::numeric_limits<double>::min());
        report.max_rel_err = std::max(report.max_rel_err, std::abs(report.lhs[i] - report.rhs[i]) / denom);
    }
    report.columns_checked = d;
    return report;
}

std::string lipschitz_report_json(const LipschitzReport& report) {
    nlohmann::ordered_json doc;
    doc["max_rel_err"] = report.max_rel_err;
    doc["columns_checked"] = report.columns_checked;
    return doc.dump(2) + "\n";
}

template <Real T>
NuBoundednessReport nu_boundedness_report(std::span<const Vector<T>> nu_trace, double plateau_rtol) {
    if (nu_trace.size() < 100) {
        throw InvalidConfig("nu_boundedness_report: need at least 100 snapshots, got " +
                            std::to_string(nu_trace.size()));
    }
    NuBoundednessReport report;
    const std::size_t half = nu_trace.size() / 2;
    for (std::size_t t = 0; t < nu_trace.size(); ++t) {
        const double n = static_cast<double>(norm(nu_trace[t]));
        if (!std::isfinite(n)) {
            report.sup_norm = std::numeric_limits<double>::infinity();
            report.monotone_tail = false;
            return report;
        }
        if (t < half) {
            report.max_first_half = std::max(report.max_first_half, n);
        } else {
            report.max_second_half = std::max(report.max_second_half, n);
        }
    }
    report.sup_norm = std::max(report.max_first_half, report.max_second_half);
    report.monotone_tail =
        report.max_second_half <= report.max_first_half + plateau_rtol * report.sup_norm;
    return report;
}

#define POWERNORM_INSTANTIATE(T)                                                             \
    template SpectrumReport embedding_spectrum(const Matrix<T>&, JacobiOptions);             \
    template LipschitzReport lipschitz_identity_check(const Matrix<T>&, const Matrix<T>&,    \
                                                      const AffineParams<T>&);               \
    template NuBoundednessReport nu_boundedness_report(std::span<const Vector<T>>, double);

POWERNORM_INSTANTIATE(float)
POWERNORM_INSTANTIATE(double)

#undef POWERNORM_INSTANTIATE

} // namespace powernorm

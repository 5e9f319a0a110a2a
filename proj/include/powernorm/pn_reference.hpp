#pragma once

// Straight-line PowerNorm step written from the update equations with raw
// arrays, used to pin the library implementation bit for bit. Evaluation
// order: sums run over rows in increasing order and divide by B at the end.

#include <cmath>
#include <cstddef>
#include <vector>

namespace powernorm::reference {

struct PnReferenceStep {
    std::vector<double> y, xhat, dx;            // B*d, row-major
    std::vector<double> psi2, nu;               // updated state
    std::vector<double> dgamma, dbeta;
};

// x, dy: B*d row-major. psi2, nu: state before the step. When `warmup` is
// set the batch quadratic mean replaces psi^(t-1) and nu is left alone.
inline PnReferenceStep pn_reference_step(const std::vector<double>& x, const std::vector<double>& dy,
                                         std::size_t B, std::size_t d,
                                         const std::vector<double>& gamma,
                                         const std::vector<double>& beta,
                                         const std::vector<double>& psi2_prev,
                                         const std::vector<double>& nu_prev, double alpha_fwd,
                                         double alpha_bwd, double eps, bool warmup) {
    PnReferenceStep r;
    r.y.assign(B * d, 0.0);
    r.xhat.assign(B * d, 0.0);
    r.dx.assign(B * d, 0.0);
    r.psi2 = psi2_prev;
    r.nu = nu_prev;
    r.dgamma.assign(d, 0.0);
    r.dbeta.assign(d, 0.0);

    std::vector<double> psi_b2(d, 0.0);
    for (std::size_t i = 0; i < B; ++i)
        for (std::size_t j = 0; j < d; ++j) psi_b2[j] += x[i * d + j] * x[i * d + j];
    for (std::size_t j = 0; j < d; ++j) psi_b2[j] /= double(B);

    std::vector<double> div(d);
    for (std::size_t j = 0; j < d; ++j) div[j] = std::sqrt((warmup ? psi_b2[j] : psi2_prev[j]) + eps);

    for (std::size_t i = 0; i < B; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            const std::size_t k = i * d + j;
            r.xhat[k] = x[k] / div[j];
            r.y[k] = gamma[j] * r.xhat[k] + beta[j];
        }
    }
    for (std::size_t j = 0; j < d; ++j) {
        r.psi2[j] = psi2_prev[j] + (1.0 - alpha_fwd) * (psi_b2[j] - psi2_prev[j]);
    }

    std::vector<double> g(B * d);
    for (std::size_t k = 0; k < B * d; ++k) g[k] = gamma[k % d] * dy[k];
    for (std::size_t i = 0; i < B; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            const std::size_t k = i * d + j;
            const double xt = g[k] - nu_prev[j] * r.xhat[k];
            r.dx[k] = xt / div[j];
        }
    }
    if (!warmup) {
        std::vector<double> Gamma(d, 0.0), Lambda(d, 0.0);
        for (std::size_t i = 0; i < B; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                const std::size_t k = i * d + j;
                Gamma[j] += r.xhat[k] * r.xhat[k];
                Lambda[j] += g[k] * r.xhat[k];
            }
        }
        for (std::size_t j = 0; j < d; ++j) {
            Gamma[j] /= double(B);
            Lambda[j] /= double(B);
            const double om = 1.0 - alpha_bwd;
            r.nu[j] = nu_prev[j] * (1.0 - om * Gamma[j]) + om * Lambda[j];
        }
    }
    for (std::size_t i = 0; i < B; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            const std::size_t k = i * d + j;
            r.dgamma[j] += dy[k] * r.xhat[k];
            r.dbeta[j] += dy[k];
        }
    }
    return r;
}

} // namespace powernorm::reference

#include "powernorm/normalization.hpp"

#include <cmath>
#include <string>

namespace powernorm {

std::string_view to_string(NormKind kind) {
    switch (kind) {
    case NormKind::BN: return "bn";
    case NormKind::LN: return "ln";
    case NormKind::PNV: return "pnv";
    case NormKind::PN: return "pn";
    }
    return "?";
}

NormKind parse_norm_kind(std::string_view name) {
    if (name == "bn") return NormKind::BN;
    if (name == "ln") return NormKind::LN;
    if (name == "pnv") return NormKind::PNV;
    if (name == "pn") return NormKind::PN;
    throw InvalidConfig("unknown norm kind '" + std::string(name) + "' (expected bn|ln|pnv|pn)");
}

namespace {

template <Real T>
void check_input(const Matrix<T>& x, const AffineParams<T>& p, std::size_t state_dim,
                 const char* who) {
    if (x.empty()) throw ShapeMismatch(std::string(who) + ": empty input");
    if (x.cols() != p.dim() || p.beta.size() != p.dim()) {
        throw ShapeMismatch(std::string(who) + ": input has " + std::to_string(x.cols()) +
                            " features, params have " + std::to_string(p.dim()));
    }
    if (state_dim != 0 && state_dim != x.cols()) {
        throw ShapeMismatch(std::string(who) + ": input has " + std::to_string(x.cols()) +
                            " features, state has " + std::to_string(state_dim));
    }
}

template <Real T>
void check_dy(const Matrix<T>& dy, const BackwardCache<T>& cache, NormKind kind,
              const char* who) {
    if (cache.kind != kind) {
        throw ShapeMismatch(std::string(who) + ": cache was produced by a " +
                            std::string(to_string(cache.kind)) + " forward");
    }
    if (!dy.same_shape(cache.normalized)) {
        throw ShapeMismatch(std::string(who) + ": dy is " + std::to_string(dy.rows()) + "x" +
                            std::to_string(dy.cols()) + ", forward was " +
                            std::to_string(cache.rows()) + "x" + std::to_string(cache.cols()));
    }
}

// dgamma = sum_i dy_i (.) n_i, dbeta = sum_i dy_i.
template <Real T>
void affine_grads(const Matrix<T>& dy, const Matrix<T>& normalized, BackwardResult<T>& out) {
    out.dgamma = col_dot(dy, normalized);
    out.dbeta = col_sum(dy);
}

// Backward through a fixed per-feature divisor (inference-mode caches).
template <Real T>
BackwardResult<T> fixed_divisor_backward(const Matrix<T>& dy, const BackwardCache<T>& cache) {
    BackwardResult<T> out;
    out.dx = Matrix<T>(dy.rows(), dy.cols());
    for (std::size_t i = 0; i < dy.rows(); ++i) {
        auto g = dy.row(i);
        auto d = out.dx.row(i);
        for (std::size_t j = 0; j < dy.cols(); ++j) d[j] = cache.gamma[j] / cache.divisor[j] * g[j];
    }
    affine_grads(dy, cache.normalized, out);
    return out;
}

} // namespace

template <Real T>
AffineParams<T> AffineParams<T>::identity(std::size_t d) {
    return {Vector<T>(d, T(1)), Vector<T>(d, T(0))};
}

template <Real T>
void AffineParams<T>::validate() const {
    if (gamma.size() != beta.size()) throw ShapeMismatch("AffineParams: gamma/beta length differ");
    if (!all_finite(gamma) || !all_finite(beta)) throw NumericalFailure("AffineParams: non-finite");
}

template <Real T>
BNRunningState<T> BNRunningState<T>::init(std::size_t d, T alpha, T eps) {
    if (!(alpha > T(0) && alpha < T(1))) throw InvalidConfig("BN alpha must lie in (0,1)");
    if (eps < T(0)) throw InvalidConfig("eps must be >= 0");
    return {Vector<T>(d, T(0)), Vector<T>(d, T(1)), alpha, eps};
}

template <Real T>
PNVRunningState<T> PNVRunningState<T>::init(std::size_t d, T alpha, T eps) {
    if (!(alpha > T(0) && alpha < T(1))) throw InvalidConfig("PN-V alpha must lie in (0,1)");
    if (eps < T(0)) throw InvalidConfig("eps must be >= 0");
    return {Vector<T>(d, T(1)), alpha, eps};
}

template <Real T>
PNState<T> PNState<T>::init(std::size_t d, T alpha_fwd, T alpha_bwd, std::uint64_t warmup_steps,
                            T eps) {
    // alpha = 1 freezes the corresponding statistic.
    if (!(alpha_fwd > T(0) && alpha_fwd <= T(1)) || !(alpha_bwd > T(0) && alpha_bwd <= T(1))) {
        throw InvalidConfig("PN alpha_fwd/alpha_bwd must lie in (0,1]");
    }
    if (eps < T(0)) throw InvalidConfig("eps must be >= 0");
    PNState s;
    s.psi2 = Vector<T>(d, T(1));
    s.nu = Vector<T>(d, T(0));
    s.alpha_fwd = alpha_fwd;
    s.alpha_bwd = alpha_bwd;
    s.warmup_steps = warmup_steps;
    s.eps = eps;
    return s;
}

template <Real T>
bool PNState<T>::initialized() const {
    if (psi2.empty() || nu.size() != psi2.size()) return false;
    for (T v : psi2)
        if (!(v > T(0))) return false;
    return true;
}

// ---------------------------------------------------------------------------
// BN

template <Real T>
ForwardResult<T> bn_forward(const Matrix<T>& x, const AffineParams<T>& p, BNRunningState<T>& s,
                            Mode mode, bool instrument) {
    check_input(x, p, s.dim(), "bn_forward");
    ForwardResult<T> out;
    auto& c = out.cache;
    c.kind = NormKind::BN;
    c.mode = mode;
    c.instrumented = instrument;
    c.gamma = p.gamma;

    if (mode == Mode::Inference) {
        c.divisor = sqrt_eps(s.sigma2, s.eps);
        c.normalized = div_cols(sub_rows(x, s.mu), c.divisor);
        out.y = affine(p.gamma, c.normalized, p.beta);
        return out;
    }

    c.batch_mean = col_mean(x);
    c.batch_var = col_variance(x, c.batch_mean);
    c.divisor = sqrt_eps(c.batch_var, s.eps);
    c.normalized = div_cols(sub_rows(x, c.batch_mean), c.divisor);
    out.y = affine(p.gamma, c.normalized, p.beta);

    if (instrument) {
        c.running_mean = s.mu;
        c.running_var = s.sigma2;
    }
    const T a = s.alpha;
    for (std::size_t j = 0; j < s.dim(); ++j) {
        s.mu[j] = a * s.mu[j] + (T(1) - a) * c.batch_mean[j];
        s.sigma2[j] = a * s.sigma2[j] + (T(1) - a) * c.batch_var[j];
    }
    return out;
}

template <Real T>
BackwardResult<T> bn_backward(const Matrix<T>& dy, BackwardCache<T>& cache) {
    check_dy(dy, cache, NormKind::BN, "bn_backward");
    if (cache.mode == Mode::Inference) return fixed_divisor_backward(dy, cache);

    const std::size_t B = dy.rows();
    const std::size_t d = dy.cols();
    const Matrix<T>& xc = cache.normalized;
    const Vector<T> sum_dy = col_sum(dy);
    const Vector<T> sum_dy_xc = col_dot(dy, xc);

    // dL/dx_i = (g/s) dy_i - (g/(s B)) sum_j (dy_j + dy_j xc_j xc_i)
    //                        \__ g_mu __/  \____ g_sigma2 ____/
    Vector<T> coef(d);
    Vector<T> g_mu(d);
    for (std::size_t j = 0; j < d; ++j) {
        coef[j] = cache.gamma[j] / (cache.divisor[j] * static_cast<T>(B));
        g_mu[j] = coef[j] * sum_dy[j];
    }

    BackwardResult<T> out;
    out.dx = Matrix<T>(B, d);
    if (cache.instrumented) cache.g_sigma2 = Matrix<T>(B, d);
    for (std::size_t i = 0; i < B; ++i) {
        auto g = dy.row(i);
        auto n = xc.row(i);
        auto dx = out.dx.row(i);
        for (std::size_t j = 0; j < d; ++j) {
            const T direct = cache.gamma[j] / cache.divisor[j] * g[j];
            const T g_sigma2 = coef[j] * sum_dy_xc[j] * n[j];
            dx[j] = direct - (g_mu[j] + g_sigma2);
            if (cache.instrumented) cache.g_sigma2(i, j) = g_sigma2;
        }
    }
    if (cache.instrumented) cache.g_mu = std::move(g_mu);
    affine_grads(dy, xc, out);
    return out;
}

// ---------------------------------------------------------------------------
// LN

template <Real T>
ForwardResult<T> ln_forward(const Matrix<T>& x, const AffineParams<T>& p, T eps) {
    check_input(x, p, 0, "ln_forward");
    const std::size_t B = x.rows();
    const std::size_t d = x.cols();
    ForwardResult<T> out;
    auto& c = out.cache;
    c.kind = NormKind::LN;
    c.gamma = p.gamma;
    c.normalized = Matrix<T>(B, d);
    c.row_divisor = Vector<T>(B);
    for (std::size_t i = 0; i < B; ++i) {
        auto r = x.row(i);
        T mean = T(0);
        for (T v : r) mean += v;
        mean /= static_cast<T>(d);
        T var = T(0);
        for (T v : r) var += (v - mean) * (v - mean);
        var /= static_cast<T>(d);
        const T s = std::sqrt(var + eps);
        c.row_divisor[i] = s;
        auto n = c.normalized.row(i);
        for (std::size_t j = 0; j < d; ++j) n[j] = (r[j] - mean) / s;
    }
    out.y = affine(p.gamma, c.normalized, p.beta);
    return out;
}

template <Real T>
BackwardResult<T> ln_backward(const Matrix<T>& dy, const BackwardCache<T>& cache) {
    check_dy(dy, cache, NormKind::LN, "ln_backward");
    const std::size_t B = dy.rows();
    const std::size_t d = dy.cols();
    BackwardResult<T> out;
    out.dx = Matrix<T>(B, d);
    for (std::size_t i = 0; i < B; ++i) {
        auto g = dy.row(i);
        auto n = cache.normalized.row(i);
        T mean_g = T(0);
        T mean_gn = T(0);
        for (std::size_t j = 0; j < d; ++j) {
            const T gj = cache.gamma[j] * g[j];
            mean_g += gj;
            mean_gn += gj * n[j];
        }
        mean_g /= static_cast<T>(d);
        mean_gn /= static_cast<T>(d);
        auto dx = out.dx.row(i);
        const T s = cache.row_divisor[i];
        for (std::size_t j = 0; j < d; ++j) {
            dx[j] = (cache.gamma[j] * g[j] - mean_g - n[j] * mean_gn) / s;
        }
    }
    affine_grads(dy, cache.normalized, out);
    return out;
}

// ---------------------------------------------------------------------------
// PN-V

template <Real T>
ForwardResult<T> pnv_forward(const Matrix<T>& x, const AffineParams<T>& p, T eps,
                             bool instrument) {
    check_input(x, p, 0, "pnv_forward");
    ForwardResult<T> out;
    auto& c = out.cache;
    c.kind = NormKind::PNV;
    c.mode = Mode::Training;
    c.instrumented = instrument;
    c.gamma = p.gamma;
    c.batch_psi2 = col_second_moment(x);
    c.divisor = sqrt_eps(c.batch_psi2, eps);
    c.normalized = div_cols(x, c.divisor);
    out.y = affine(p.gamma, c.normalized, p.beta);
    return out;
}

template <Real T>
ForwardResult<T> pnv_forward(const Matrix<T>& x, const AffineParams<T>& p, PNVRunningState<T>& s,
                             Mode mode, bool instrument) {
    check_input(x, p, s.dim(), "pnv_forward");
    if (mode == Mode::Inference) {
        ForwardResult<T> out;
        auto& c = out.cache;
        c.kind = NormKind::PNV;
        c.mode = Mode::Inference;
        c.gamma = p.gamma;
        c.divisor = sqrt_eps(s.psi2, s.eps);
        c.normalized = div_cols(x, c.divisor);
        out.y = affine(p.gamma, c.normalized, p.beta);
        return out;
    }
    ForwardResult<T> out = pnv_forward(x, p, s.eps, instrument);
    if (instrument) out.cache.running_psi2 = s.psi2;
    const T a = s.alpha;
    for (std::size_t j = 0; j < s.dim(); ++j) {
        s.psi2[j] = a * s.psi2[j] + (T(1) - a) * out.cache.batch_psi2[j];
    }
    return out;
}

template <Real T>
BackwardResult<T> pnv_backward(const Matrix<T>& dy, BackwardCache<T>& cache) {
    check_dy(dy, cache, NormKind::PNV, "pnv_backward");
    if (cache.mode == Mode::Inference) return fixed_divisor_backward(dy, cache);

    const std::size_t B = dy.rows();
    const std::size_t d = dy.cols();
    const Matrix<T>& xh = cache.normalized;
    const Vector<T> sum_dy_xh = col_dot(dy, xh);

    // dL/dx_i = (g/psi) dy_i - (g/(B psi)) sum_j dy_j xh_j xh_i
    //                          \_______ g_psi2 _______/
    Vector<T> coef(d);
    for (std::size_t j = 0; j < d; ++j) {
        coef[j] = cache.gamma[j] / (static_cast<T>(B) * cache.divisor[j]);
    }

    BackwardResult<T> out;
    out.dx = Matrix<T>(B, d);
    if (cache.instrumented) cache.g_psi2 = Matrix<T>(B, d);
    for (std::size_t i = 0; i < B; ++i) {
        auto g = dy.row(i);
        auto n = xh.row(i);
        auto dx = out.dx.row(i);
        for (std::size_t j = 0; j < d; ++j) {
            const T direct = cache.gamma[j] / cache.divisor[j] * g[j];
            const T g_psi2 = coef[j] * sum_dy_xh[j] * n[j];
            dx[j] = direct - g_psi2;
            if (cache.instrumented) cache.g_psi2(i, j) = g_psi2;
        }
    }
    affine_grads(dy, xh, out);
    return out;
}

// ---------------------------------------------------------------------------
// PN

template <Real T>
ForwardResult<T> pn_forward(const Matrix<T>& x, const AffineParams<T>& p, PNState<T>& s,
                            Mode mode, bool instrument) {
    if (!s.initialized()) throw UninitializedState("pn_forward: running quadratic mean not set");
    check_input(x, p, s.dim(), "pn_forward");
    ForwardResult<T> out;
    auto& c = out.cache;
    c.kind = NormKind::PN;
    c.mode = mode;
    c.instrumented = instrument;
    c.gamma = p.gamma;

    if (mode == Mode::Inference) {
        c.divisor = sqrt_eps(s.psi2, s.eps);
        c.normalized = div_cols(x, c.divisor);
        c.step = s.step;
        out.y = affine(p.gamma, c.normalized, p.beta);
        return out;
    }

    c.batch_psi2 = col_second_moment(x);
    c.warmup = s.in_warmup();
    // X-hat^(t) = X^(t) / psi^(t-1); during warmup the batch statistic
    // stands in for psi^(t-1).
    c.divisor = c.warmup ? sqrt_eps(c.batch_psi2, s.eps) : sqrt_eps(s.psi2, s.eps);
    c.normalized = div_cols(x, c.divisor);
    out.y = affine(p.gamma, c.normalized, p.beta);

    if (instrument) c.running_psi2 = s.psi2;
    // (psi^(t))^2 = (psi^(t-1))^2 + (1 - alpha)(psi_B^2 - (psi^(t-1))^2)
    const T one_minus = T(1) - s.alpha_fwd;
    for (std::size_t j = 0; j < s.dim(); ++j) {
        s.psi2[j] = s.psi2[j] + one_minus * (c.batch_psi2[j] - s.psi2[j]);
    }
    ++s.step;
    c.step = s.step;
    return out;
}

template <Real T>
BackwardResult<T> pn_backward(const Matrix<T>& dy, BackwardCache<T>& cache, PNState<T>& s) {
    check_dy(dy, cache, NormKind::PN, "pn_backward");
    if (cache.mode == Mode::Inference) return fixed_divisor_backward(dy, cache);
    if (cache.consumed) throw StaleCache("pn_backward: cache already consumed");
    if (cache.step != s.step) {
        throw StaleCache("pn_backward: cache is from step " + std::to_string(cache.step) +
                         ", state is at step " + std::to_string(s.step));
    }
    if (s.dim() != dy.cols()) throw ShapeMismatch("pn_backward: state dimension differs");

    const std::size_t B = dy.rows();
    const std::size_t d = dy.cols();
    const Matrix<T>& xh = cache.normalized;

    // dL/dX-hat = gamma (.) dL/dY
    Matrix<T> grad_hat = mul_cols(cache.gamma, dy);
    cache.nu_prev = s.nu;

    // X-tilde' = dL/dX-hat - nu^(t-1) (.) X-hat;  dL/dX = X-tilde' / psi^(t-1)
    BackwardResult<T> out;
    out.dx = Matrix<T>(B, d);
    for (std::size_t i = 0; i < B; ++i) {
        auto gh = grad_hat.row(i);
        auto n = xh.row(i);
        auto dx = out.dx.row(i);
        for (std::size_t j = 0; j < d; ++j) {
            const T xt = gh[j] - cache.nu_prev[j] * n[j];
            dx[j] = xt / cache.divisor[j];
        }
    }

    // nu^(t) = nu^(t-1) (1 - (1 - alpha) Gamma) + (1 - alpha) Lambda, frozen
    // while psi is warming up.
    if (!cache.warmup) {
        const Vector<T> Gamma = col_second_moment(xh);
        Vector<T> Lambda = col_dot(grad_hat, xh);
        for (auto& v : Lambda) v /= static_cast<T>(B);
        const T one_minus = T(1) - s.alpha_bwd;
        for (std::size_t j = 0; j < d; ++j) {
            s.nu[j] = s.nu[j] * (T(1) - one_minus * Gamma[j]) + one_minus * Lambda[j];
        }
    }

    cache.grad_hat = std::move(grad_hat);
    cache.consumed = true;
    affine_grads(dy, xh, out);
    return out;
}

// ---------------------------------------------------------------------------
// Layer-scale

template <Real T>
Matrix<T> layer_scale_forward(const Matrix<T>& x, const Vector<T>& scale) {
    return mul_cols(scale, x);
}

template <Real T>
LayerScaleGrad<T> layer_scale_backward(const Matrix<T>& dy, const Matrix<T>& x,
                                       const Vector<T>& scale) {
    detail::require_same_shape(dy, x, "layer_scale_backward");
    return {mul_cols(scale, dy), col_dot(dy, x)};
}

// ---------------------------------------------------------------------------
// Padding

template <Real T>
PaddedBatch<T> PaddedBatch<T>::from_sentences(const std::vector<Matrix<T>>& sentences) {
    if (sentences.empty()) throw EmptyBatch("PaddedBatch: no sentences");
    const std::size_t d = sentences.front().cols();
    std::size_t max_len = 0;
    for (const auto& s : sentences) {
        if (s.cols() != d) throw ShapeMismatch("PaddedBatch: sentences differ in width");
        max_len = std::max(max_len, s.rows());
    }
    if (max_len == 0) throw EmptyBatch("PaddedBatch: all sentences empty");
    PaddedBatch b;
    b.num_sentences = sentences.size();
    b.max_len = max_len;
    b.values = Matrix<T>(b.num_sentences * max_len, d);
    b.mask.assign(b.num_sentences * max_len, 0);
    for (std::size_t s = 0; s < sentences.size(); ++s) {
        for (std::size_t t = 0; t < sentences[s].rows(); ++t) {
            const std::size_t r = s * max_len + t;
            auto src = sentences[s].row(t);
            std::copy(src.begin(), src.end(), b.values.row(r).begin());
            b.mask[r] = 1;
        }
    }
    return b;
}

template <Real T>
std::size_t PaddedBatch<T>::token_count() const {
    std::size_t n = 0;
    for (auto m : mask) n += m ? 1 : 0;
    return n;
}

template <Real T>
Matrix<T> flatten_nonpadded(const PaddedBatch<T>& batch) {
    if (batch.mask.size() != batch.values.rows()) {
        throw ShapeMismatch("flatten_nonpadded: mask length differs from row count");
    }
    const std::size_t n = batch.token_count();
    if (n == 0) throw EmptyBatch("flatten_nonpadded: every position is padding");
    Matrix<T> out(n, batch.values.cols());
    std::size_t k = 0;
    for (std::size_t r = 0; r < batch.values.rows(); ++r) {
        if (!batch.mask[r]) continue;
        auto src = batch.values.row(r);
        std::copy(src.begin(), src.end(), out.row(k++).begin());
    }
    return out;
}

template <Real T>
Matrix<T> scatter_nonpadded(const Matrix<T>& flat, const PaddedBatch<T>& batch) {
    if (flat.rows() != batch.token_count() || flat.cols() != batch.values.cols()) {
        throw ShapeMismatch("scatter_nonpadded: flat rows do not match mask");
    }
    Matrix<T> out(batch.values.rows(), batch.values.cols());
    std::size_t k = 0;
    for (std::size_t r = 0; r < batch.values.rows(); ++r) {
        if (!batch.mask[r]) continue;
        auto src = flat.row(k++);
        std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return out;
}

#define POWERNORM_INSTANTIATE(T)                                                               \
    template struct AffineParams<T>;                                                           \
    template struct BNRunningState<T>;                                                         \
    template struct PNVRunningState<T>;                                                        \
    template struct PNState<T>;                                                                \
    template struct PaddedBatch<T>;                                                            \
    template ForwardResult<T> bn_forward(const Matrix<T>&, const AffineParams<T>&,             \
                                         BNRunningState<T>&, Mode, bool);                      \
    template BackwardResult<T> bn_backward(const Matrix<T>&, BackwardCache<T>&);               \
    template ForwardResult<T> ln_forward(const Matrix<T>&, const AffineParams<T>&, T);         \
    template BackwardResult<T> ln_backward(const Matrix<T>&, const BackwardCache<T>&);         \
    template ForwardResult<T> pnv_forward(const Matrix<T>&, const AffineParams<T>&, T, bool);  \
    template ForwardResult<T> pnv_forward(const Matrix<T>&, const AffineParams<T>&,            \
                                          PNVRunningState<T>&, Mode, bool);                    \
    template BackwardResult<T> pnv_backward(const Matrix<T>&, BackwardCache<T>&);              \
    template ForwardResult<T> pn_forward(const Matrix<T>&, const AffineParams<T>&,             \
                                         PNState<T>&, Mode, bool);                             \
    template BackwardResult<T> pn_backward(const Matrix<T>&, BackwardCache<T>&, PNState<T>&);  \
    template Matrix<T> layer_scale_forward(const Matrix<T>&, const Vector<T>&);                \
    template LayerScaleGrad<T> layer_scale_backward(const Matrix<T>&, const Matrix<T>&,        \
                                                    const Vector<T>&);                         \
    template Matrix<T> flatten_nonpadded(const PaddedBatch<T>&);                               \
    template Matrix<T> scatter_nonpadded(const Matrix<T>&, const PaddedBatch<T>&);

POWERNORM_INSTANTIATE(float)
POWERNORM_INSTANTIATE(double)

#undef POWERNORM_INSTANTIATE

} // namespace powernorm

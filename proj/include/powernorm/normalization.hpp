#pragma once

// Batch Normalization, Layer Normalization, PN-V and PowerNorm with
// explicit forward and backward passes.
//
// Every layer is a pair of free functions: `*_forward` returns the output
// together with a BackwardCache, `*_backward` consumes that cache. Running
// statistics live in plain state structs owned by the caller, so a layer
// instance is just (AffineParams, state) and several can run on separate
// threads without sharing anything.

#include "powernorm/numerics.hpp"

#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

namespace powernorm {

enum class NormKind { BN, LN, PNV, PN };

std::string_view to_string(NormKind kind);
// Accepts "bn", "ln", "pnv", "pn". Throws InvalidConfig otherwise.
NormKind parse_norm_kind(std::string_view name);

enum class Mode { Training, Inference };

inline constexpr double kDefaultEps = 1e-5;
inline constexpr double kDefaultBnAlpha = 0.9;
inline constexpr double kDefaultPnAlpha = 0.95;

template <Real T>
struct AffineParams {
    Vector<T> gamma;
    Vector<T> beta;

    // gamma = 1, beta = 0.
    static AffineParams identity(std::size_t d);

    std::size_t dim() const { return gamma.size(); }
    void validate() const;
};

template <Real T>
struct BNRunningState {
    Vector<T> mu;
    Vector<T> sigma2;
    T alpha = T(kDefaultBnAlpha);
    T eps = T(kDefaultEps);

    // mu = 0, sigma2 = 1.
    static BNRunningState init(std::size_t d, T alpha = T(kDefaultBnAlpha),
                               T eps = T(kDefaultEps));
    std::size_t dim() const { return mu.size(); }
};

// Running quadratic mean kept by PN-V so that inference has something to
// divide by. Training never reads it.
template <Real T>
struct PNVRunningState {
    Vector<T> psi2;
    T alpha = T(kDefaultBnAlpha);
    T eps = T(kDefaultEps);

    static PNVRunningState init(std::size_t d, T alpha = T(kDefaultBnAlpha),
                                T eps = T(kDefaultEps));
    std::size_t dim() const { return psi2.size(); }
};

template <Real T>
struct PNState {
    Vector<T> psi2;  // running quadratic mean
    Vector<T> nu;    // running backward statistic
    T alpha_fwd = T(kDefaultPnAlpha);
    T alpha_bwd = T(kDefaultPnAlpha);
    std::uint64_t step = 0;          // completed training forwards
    std::uint64_t warmup_steps = 0;  // forwards that use the batch statistic
    T eps = T(kDefaultEps);

    // psi2 = 1, nu = 0, step = 0.
    static PNState init(std::size_t d, T alpha_fwd = T(kDefaultPnAlpha),
                        T alpha_bwd = T(kDefaultPnAlpha), std::uint64_t warmup_steps = 0,
                        T eps = T(kDefaultEps));

    bool initialized() const;
    bool in_warmup() const { return step < warmup_steps; }
    std::size_t dim() const { return psi2.size(); }
};

// Everything a backward pass needs from its forward, plus the slots the
// instrumentation reads. Fields that do not apply to a layer kind stay empty.
template <Real T>
struct BackwardCache {
    NormKind kind = NormKind::LN;
    Mode mode = Mode::Training;
    bool instrumented = false;

    Matrix<T> normalized;   // X-check (BN), X-hat (PN-V, PN), row-normalized (LN)
    Vector<T> divisor;      // per-feature divisor used in the forward
    Vector<T> row_divisor;  // LN only: per-row divisor
    Vector<T> gamma;        // snapshot of gamma at forward time

    // Batch statistics of the forward input.
    Vector<T> batch_mean;   // BN
    Vector<T> batch_var;    // BN
    Vector<T> batch_psi2;   // PN-V, PN

    // Running statistics as they were before this forward updated them.
    // Filled only when instrumented.
    Vector<T> running_mean;
    Vector<T> running_var;
    Vector<T> running_psi2;

    // PN bookkeeping.
    std::uint64_t step = 0;
    bool warmup = false;
    bool consumed = false;
    Matrix<T> grad_hat;     // dL/dX-hat, written by pn_backward
    Vector<T> nu_prev;      // nu^(t-1) used by pn_backward

    // Input-gradient contributions of the batch statistics, written by
    // backward when instrumented. g_mu is the same for every row.
    Vector<T> g_mu;
    Matrix<T> g_sigma2;
    Matrix<T> g_psi2;

    std::size_t rows() const { return normalized.rows(); }
    std::size_t cols() const { return normalized.cols(); }
};

template <Real T>
struct ForwardResult {
    Matrix<T> y;
    BackwardCache<T> cache;
};

template <Real T>
struct BackwardResult {
    Matrix<T> dx;
    Vector<T> dgamma;
    Vector<T> dbeta;
};

// ---------------------------------------------------------------------------
// Batch Normalization

template <Real T>
ForwardResult<T> bn_forward(const Matrix<T>& x, const AffineParams<T>& p, BNRunningState<T>& s,
                            Mode mode, bool instrument = false);

template <Real T>
BackwardResult<T> bn_backward(const Matrix<T>& dy, BackwardCache<T>& cache);

// ---------------------------------------------------------------------------
// Layer Normalization (per-row statistics, no running state)

template <Real T>
ForwardResult<T> ln_forward(const Matrix<T>& x, const AffineParams<T>& p,
                            T eps = T(kDefaultEps));

template <Real T>
BackwardResult<T> ln_backward(const Matrix<T>& dy, const BackwardCache<T>& cache);

// ---------------------------------------------------------------------------
// PN-V: divide by the batch quadratic mean, exact backward.

template <Real T>
ForwardResult<T> pnv_forward(const Matrix<T>& x, const AffineParams<T>& p,
                             T eps = T(kDefaultEps), bool instrument = false);

// Same, but also tracks a running quadratic mean in training and uses it
// in inference.
template <Real T>
ForwardResult<T> pnv_forward(const Matrix<T>& x, const AffineParams<T>& p,
                             PNVRunningState<T>& s, Mode mode, bool instrument = false);

template <Real T>
BackwardResult<T> pnv_backward(const Matrix<T>& dy, BackwardCache<T>& cache);

// ---------------------------------------------------------------------------
// PowerNorm: divide by the running quadratic mean psi^(t-1), approximate
// backward through nu.

template <Real T>
ForwardResult<T> pn_forward(const Matrix<T>& x, const AffineParams<T>& p, PNState<T>& s,
                            Mode mode, bool instrument = false);

template <Real T>
BackwardResult<T> pn_backward(const Matrix<T>& dy, BackwardCache<T>& cache, PNState<T>& s);

// ---------------------------------------------------------------------------
// Layer-scale: y = scale (.) x, applied in front of a normalization layer.

template <Real T>
Matrix<T> layer_scale_forward(const Matrix<T>& x, const Vector<T>& scale);

template <Real T>
struct LayerScaleGrad {
    Matrix<T> dx;
    Vector<T> dscale;
};

template <Real T>
LayerScaleGrad<T> layer_scale_backward(const Matrix<T>& dy, const Matrix<T>& x,
                                       const Vector<T>& scale);

// ---------------------------------------------------------------------------
// Padded sentence batches.
//
// `values` holds num_sentences * max_len rows (sentence-major); mask[r] is
// true when row r is a real token.

template <Real T>
struct PaddedBatch {
    std::size_t num_sentences = 0;
    std::size_t max_len = 0;
    Matrix<T> values;
    std::vector<std::uint8_t> mask;

    // Pads every sentence with zero rows up to the longest one.
    static PaddedBatch from_sentences(const std::vector<Matrix<T>>& sentences);

    std::size_t token_count() const;
    std::size_t dim() const { return values.cols(); }
};

// Rows of the real tokens, in order. Throws EmptyBatch when every position
// is padding.
template <Real T>
Matrix<T> flatten_nonpadded(const PaddedBatch<T>& batch);

// Inverse of flatten_nonpadded: places `flat` back at the unmasked rows of
// a zero matrix shaped like batch.values.
template <Real T>
Matrix<T> scatter_nonpadded(const Matrix<T>& flat, const PaddedBatch<T>& batch);

} // namespace powernorm

#include "powernorm/instrumentation.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>

namespace powernorm {

template <Real T>
T stats_distance(const Vector<T>& batch_stat, const Vector<T>& running_stat) {
    detail::require_same_len(batch_stat, running_stat, "stats_distance");
    T acc = T(0);
    for (std::size_t j = 0; j < batch_stat.size(); ++j) {
        const T diff = batch_stat[j] - running_stat[j];
        acc += diff * diff;
    }
    return std::sqrt(acc) / static_cast<T>(batch_stat.size());
}

namespace {

template <Real T>
double mean_row_norm(const Matrix<T>& m) {
    double acc = 0;
    for (std::size_t i = 0; i < m.rows(); ++i) acc += static_cast<double>(row_norm(m, i));
    return acc / static_cast<double>(m.rows()) / static_cast<double>(m.cols());
}

} // namespace

template <Real T>
ContributionNorms contribution_norms(const BackwardCache<T>& cache) {
    if (!cache.instrumented) {
        throw InstrumentationDisabled("contribution_norms: cache produced without instrumentation");
    }
    ContributionNorms out;
    switch (cache.kind) {
    case NormKind::BN:
        if (cache.g_sigma2.empty()) {
            throw InstrumentationDisabled("contribution_norms: bn_backward has not run on this cache");
        }
        // g_mu is identical for every row, so its row average is itself.
        out.g_mu = static_cast<double>(norm(cache.g_mu)) / static_cast<double>(cache.g_mu.size());
        out.g_sigma2 = mean_row_norm(cache.g_sigma2);
        break;
    case NormKind::PNV:
        if (cache.g_psi2.empty()) {
            throw InstrumentationDisabled("contribution_norms: pnv_backward has not run on this cache");
        }
        out.g_psi2 = mean_row_norm(cache.g_psi2);
        break;
    default:
        break;
    }
    return out;
}

bool alpha_condition(double c1, double alpha_bwd) {
    return c1 * c1 < 1.0 / (1.0 - alpha_bwd);
}

template <Real T>
AssumptionProbe assumption_probe(const BackwardCache<T>& cache, const PNState<T>& state) {
    if (cache.kind != NormKind::PN || cache.grad_hat.empty()) {
        throw Error("assumption_probe: needs a PN cache that pn_backward has consumed");
    }
    AssumptionProbe out;
    for (std::size_t i = 0; i < cache.normalized.rows(); ++i) {
        out.c1 = std::max(out.c1, static_cast<double>(row_norm(cache.normalized, i)));
        out.c2 = std::max(out.c2, static_cast<double>(row_norm(cache.grad_hat, i)));
    }
    out.alpha_condition_ok = alpha_condition(out.c1, static_cast<double>(state.alpha_bwd));
    return out;
}

template <Real T>
Vector<T> gamma_psi_ratio(const AffineParams<T>& p, const Vector<T>& psi_b) {
    detail::require_same_len(p.gamma, psi_b, "gamma_psi_ratio");
    Vector<T> out(psi_b.size());
    for (std::size_t j = 0; j < psi_b.size(); ++j) {
        if (psi_b[j] == T(0)) {
            throw DivisionByZero("gamma_psi_ratio: psi_B is zero at feature " + std::to_string(j));
        }
        out[j] = p.gamma[j] / psi_b[j];
    }
    return out;
}

template <Real T>
MetricsRecord collect_metrics(std::uint64_t step, const std::string& layer_id,
                              const BackwardCache<T>& cache, const AffineParams<T>& params,
                              const PNState<T>* pn_state) {
    MetricsRecord rec;
    rec.step = step;
    rec.layer_id = layer_id;
    rec.norm_kind = cache.kind;
    if (cache.mode != Mode::Training) return rec;

    auto ratio_max = [&](const Vector<T>& psi2) -> std::optional<double> {
        const Vector<T> psi_b = map(psi2, [](T v) { return std::sqrt(v); });
        for (T v : psi_b)
            if (v == T(0)) return std::nullopt;
        const Vector<T> r = gamma_psi_ratio(params, psi_b);
        return static_cast<double>(*std::max_element(r.begin(), r.end()));
    };

    switch (cache.kind) {
    case NormKind::BN:
        if (!cache.running_mean.empty()) {
            rec.dist_mu = stats_distance(cache.batch_mean, cache.running_mean);
            rec.dist_sigma2 = stats_distance(cache.batch_var, cache.running_var);
        }
        if (cache.instrumented && !cache.g_sigma2.empty()) {
            const auto n = contribution_norms(cache);
            rec.norm_g_mu = n.g_mu;
            rec.norm_g_sigma2 = n.g_sigma2;
        }
        break;
    case NormKind::PNV:
        if (!cache.running_psi2.empty()) {
            rec.dist_psi2 = stats_distance(cache.batch_psi2, cache.running_psi2);
        }
        if (cache.instrumented && !cache.g_psi2.empty()) {
            rec.norm_g_psi2 = contribution_norms(cache).g_psi2;
        }
        rec.gamma_psi_ratio_max = ratio_max(cache.batch_psi2);
        break;
    case NormKind::PN:
        if (!cache.running_psi2.empty()) {
            rec.dist_psi2 = stats_distance(cache.batch_psi2, cache.running_psi2);
        }
        if (pn_state != nullptr) {
            rec.nu_norm = static_cast<double>(norm(pn_state->nu)) /
                          static_cast<double>(pn_state->nu.size());
            if (!cache.grad_hat.empty()) {
                const auto probe = assumption_probe(cache, *pn_state);
                rec.c1 = probe.c1;
                rec.c2 = probe.c2;
            }
        }
        rec.gamma_psi_ratio_max = ratio_max(cache.batch_psi2);
        break;
    case NormKind::LN:
        break;
    }
    return rec;
}

std::string format_number(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc()) return "nan";
    return std::string(buf, end);
}

std::string metrics_csv_header() {
    return "step,layer_id,norm_kind,dist_mu,dist_sigma2,dist_psi2,norm_g_mu,norm_g_sigma2,"
           "norm_g_psi2,nu_norm,c1,c2,gamma_psi_ratio_max";
}

std::string metrics_csv_row(const MetricsRecord& rec) {
    std::string row = std::to_string(rec.step) + "," + rec.layer_id + "," +
                      std::string(to_string(rec.norm_kind));
    for (const auto& cell : {rec.dist_mu, rec.dist_sigma2, rec.dist_psi2, rec.norm_g_mu,
                             rec.norm_g_sigma2, rec.norm_g_psi2, rec.nu_norm, rec.c1, rec.c2,
                             rec.gamma_psi_ratio_max}) {
        row += ",";
        if (cell) row += format_number(*cell);
    }
    return row;
}

MetricsRecorder::MetricsRecorder(const std::filesystem::path& path, std::size_t flush_every)
    : out_(path), flush_every_(std::max<std::size_t>(flush_every, 1)) {
    if (!out_) throw Error("MetricsRecorder: cannot open " + path.string());
    out_ << metrics_csv_header() << "\n";
    out_.flush();
}

MetricsRecorder::~MetricsRecorder() {
    try {
        flush();
    } catch (...) {
    }
}

void MetricsRecorder::record(MetricsRecord rec) {
    buffer_.push_back(std::move(rec));
}

void MetricsRecorder::step_done() {
    if (++steps_since_flush_ >= flush_every_) flush();
}

void MetricsRecorder::flush() {
    for (const auto& rec : buffer_) out_ << metrics_csv_row(rec) << "\n";
    written_ += buffer_.size();
    buffer_.clear();
    steps_since_flush_ = 0;
    out_.flush();
}

#define POWERNORM_INSTANTIATE(T)                                                             \
    template T stats_distance(const Vector<T>&, const Vector<T>&);                           \
    template ContributionNorms contribution_norms(const BackwardCache<T>&);                  \
    template AssumptionProbe assumption_probe(const BackwardCache<T>&, const PNState<T>&);   \
    template Vector<T> gamma_psi_ratio(const AffineParams<T>&, const Vector<T>&);            \
    template MetricsRecord collect_metrics(std::uint64_t, const std::string&,                \
                                           const BackwardCache<T>&, const AffineParams<T>&,  \
                                           const PNState<T>*);

POWERNORM_INSTANTIATE(float)
POWERNORM_INSTANTIATE(double)

#undef POWERNORM_INSTANTIATE

} // namespace powernorm

#include "cli_internal.hpp"

#include "powernorm/normalization.hpp"
#include "powernorm/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace powernorm::cli {

std::uint64_t count_outliers(std::vector<double> values, double factor) {
    if (values.empty()) return 0;
    std::vector<double> sorted = values;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    const double median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    return static_cast<std::uint64_t>(
        std::count_if(values.begin(), values.end(), [&](double v) { return v > factor * median; }));
}

namespace {

std::optional<double> plateau(const std::vector<MetricsRecord>& recs, std::optional<double> MetricsRecord::*m) {
    const std::size_t from = recs.size() / 2;
    double sum = 0;
    std::size_t n = 0;
    for (std::size_t k = from; k < recs.size(); ++k) {
        if (!(recs[k].*m)) return std::nullopt;
        sum += *(recs[k].*m);
        ++n;
    }
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
}

std::optional<std::uint64_t> outliers(const std::vector<MetricsRecord>& recs, std::optional<double> MetricsRecord::*m,
                                      double factor) {
    std::vector<double> v;
    for (const auto& r : recs) {
        if (!(r.*m)) return std::nullopt;
        v.push_back(*(r.*m));
    }
    if (v.empty()) return std::nullopt;
    return count_outliers(std::move(v), factor);
}

template <class V>
ordered_json opt_json(const std::optional<V>& v) {
    return v ? ordered_json(*v) : ordered_json(nullptr);
}

} // namespace

StatsSummary run_stats(const StatsSettings& s) {
    if (s.norm != "bn" && s.norm != "pnv" && s.norm != "pn") {
        throw UsageError("--norm must be bn, pnv or pn; got '" + s.norm + "'");
    }
    if (s.steps == 0) throw UsageError("--steps must be >= 1");
    if (!(s.alpha > 0 && s.alpha < 1)) throw UsageError("--alpha must lie in (0,1)");
    if (!(s.eps >= 0)) throw UsageError("--eps must be >= 0");
    if (!(s.outlier_factor > 0)) throw UsageError("--outlier-factor must be > 0");
    SynthStreamConfig sc;
    try {
        sc.kind = parse_stream_kind(s.stream);
        sc.dim = s.dim;
        sc.tokens_per_batch = s.tokens;
        sc.seed = s.seed;
        sc.mean_offset = s.mean_offset;
        sc.sentence_len = s.sentence_len;
        sc.vocab = s.vocab;
        sc.zipf_exponent = s.zipf_exponent;
        sc.token_scale = s.token_scale;
        sc.sentence_scale = s.sentence_scale;
        sc.min_len = s.min_len;
        sc.max_len = s.max_len;
        sc.validate();
    } catch (const InvalidConfig& e) {
        throw UsageError(e.what());
    }

    const auto start = std::chrono::system_clock::now();
    const std::filesystem::path out(s.out);
    prepare_out_dir(out);

    const std::size_t d = s.dim;
    SynthStream stream(sc);
    // Upstream gradient model: dY = Y A + N, with A fixed for the run and
    // N fresh Gaussian noise per batch.
    std::seed_seq grad_seq{s.seed, std::uint64_t(0x6A4D)};
    std::mt19937_64 grad_rng(grad_seq);
    std::normal_distribution<double> normal(0.0, 1.0);
    MatrixD A(d, d);
    for (auto& v : A.values()) v = normal(grad_rng) / std::sqrt(static_cast<double>(d));

    const auto params = AffineParams<double>::identity(d);
    auto bn = BNRunningState<double>::init(d, s.alpha, s.eps);
    auto pnv = PNVRunningState<double>::init(d, s.alpha, s.eps);
    auto pn = PNState<double>::init(d, s.alpha, s.alpha, 0, s.eps);

    StatsSummary res;
    {
        MetricsRecorder recorder(out / "metrics.csv", 100);
        for (std::uint64_t step = 1; step <= s.steps; ++step) {
            const MatrixD x = flatten_nonpadded(stream.next());
            ForwardResult<double> fr;
            if (s.norm == "bn") fr = bn_forward(x, params, bn, Mode::Training, true);
            else if (s.norm == "pnv") fr = pnv_forward(x, params, pnv, Mode::Training, true);
            else fr = pn_forward(x, params, pn, Mode::Training, true);

            MatrixD dy = matmul(fr.y, A);
            for (auto& v : dy.values()) v += normal(grad_rng);
            if (s.norm == "bn") bn_backward(dy, fr.cache);
            else if (s.norm == "pnv") pnv_backward(dy, fr.cache);
            else pn_backward(dy, fr.cache, pn);

            auto rec = collect_metrics(step, s.norm, fr.cache, params, s.norm == "pn" ? &pn : nullptr);
            res.records.push_back(rec);
            recorder.record(std::move(rec));
            recorder.step_done();
        }
        recorder.flush();
    }

    res.plateau_dist_mu = plateau(res.records, &MetricsRecord::dist_mu);
    res.plateau_dist_sigma2 = plateau(res.records, &MetricsRecord::dist_sigma2);
    res.plateau_dist_psi2 = plateau(res.records, &MetricsRecord::dist_psi2);
    res.outliers_g_mu = outliers(res.records, &MetricsRecord::norm_g_mu, s.outlier_factor);
    res.outliers_g_sigma2 = outliers(res.records, &MetricsRecord::norm_g_sigma2, s.outlier_factor);
    res.outliers_g_psi2 = outliers(res.records, &MetricsRecord::norm_g_psi2, s.outlier_factor);

    ordered_json summary;
    summary["stream"] = s.stream;
    summary["norm"] = s.norm;
    summary["steps"] = s.steps;
    summary["plateau_from_step"] = s.steps / 2 + 1;
    summary["plateau_dist_mu"] = opt_json(res.plateau_dist_mu);
    summary["plateau_dist_sigma2"] = opt_json(res.plateau_dist_sigma2);
    summary["plateau_dist_psi2"] = opt_json(res.plateau_dist_psi2);
    summary["outlier_factor"] = s.outlier_factor;
    summary["outliers_norm_g_mu"] = opt_json(res.outliers_g_mu);
    summary["outliers_norm_g_sigma2"] = opt_json(res.outliers_g_sigma2);
    summary["outliers_norm_g_psi2"] = opt_json(res.outliers_g_psi2);
    write_text_file(out / "summary.json", summary.dump(2) + "\n");

    Manifest m{"stats", settings_to_json(s, stats_fields()), s.seed, "f64", start,
               {out / "metrics.csv", out / "summary.json"}};
    write_manifest(out, m);
    return res;
}

} // namespace powernorm::cli

#pragma once

// Per-step diagnostics for normalization layers: drift between batch and
// running statistics, the norms of the batch-statistic gradient terms, the
// PN backward statistic, and the constants PN's boundedness argument
// assumes.

#include "powernorm/normalization.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace powernorm {

struct MetricsRecord {
    std::uint64_t step = 0;
    std::string layer_id;
    NormKind norm_kind = NormKind::LN;
    std::optional<double> dist_mu;
    std::optional<double> dist_sigma2;
    std::optional<double> dist_psi2;
    std::optional<double> norm_g_mu;
    std::optional<double> norm_g_sigma2;
    std::optional<double> norm_g_psi2;
    std::optional<double> nu_norm;
    std::optional<double> c1;
    std::optional<double> c2;
    std::optional<double> gamma_psi_ratio_max;
};

// (1/d) * ||batch_stat - running_stat||
template <Real T>
T stats_distance(const Vector<T>& batch_stat, const Vector<T>& running_stat);

struct ContributionNorms {
    std::optional<double> g_mu;      // BN
    std::optional<double> g_sigma2;  // BN
    std::optional<double> g_psi2;    // PN-V
};

// Average over rows i of (1/d) * ||contribution_i||, for each batch-statistic
// term the backward recorded. Throws InstrumentationDisabled when the cache
// was not produced with instrumentation on, or backward has not run yet.
template <Real T>
ContributionNorms contribution_norms(const BackwardCache<T>& cache);

struct AssumptionProbe {
    double c1 = 0;  // max_i ||x-hat_i||
    double c2 = 0;  // max_i ||dL/dx-hat_i||
    bool alpha_condition_ok = false;
};

// c1^2 < 1 / (1 - alpha_bwd)
bool alpha_condition(double c1, double alpha_bwd);

// Requires a training-mode PN cache that pn_backward has consumed.
template <Real T>
AssumptionProbe assumption_probe(const BackwardCache<T>& cache, const PNState<T>& state);

// gamma_i / psi_B,i. Throws DivisionByZero on a zero psi_B entry.
template <Real T>
Vector<T> gamma_psi_ratio(const AffineParams<T>& p, const Vector<T>& psi_b);

// Everything defined for the cache's layer kind. `pn_state` is required for
// PN layers and ignored otherwise. The cache must come from a training
// forward; contribution norms and PN probes also need backward to have run.
template <Real T>
MetricsRecord collect_metrics(std::uint64_t step, const std::string& layer_id,
                              const BackwardCache<T>& cache, const AffineParams<T>& params,
                              const PNState<T>* pn_state = nullptr);

std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRecord& rec);

// Locale-independent shortest round-trip formatting.
std::string format_number(double v);

// Buffers records and appends them to a CSV file every `flush_every` steps.
// Single writer; readers should only look at the file after flush().
class MetricsRecorder {
public:
    MetricsRecorder(const std::filesystem::path& path, std::size_t flush_every = 10);
    ~MetricsRecorder();

    MetricsRecorder(const MetricsRecorder&) = delete;
    MetricsRecorder& operator=(const MetricsRecorder&) = delete;

    void record(MetricsRecord rec);
    void step_done();
    void flush();

    std::size_t buffered() const { return buffer_.size(); }
    std::size_t written() const { return written_; }

private:
    std::ofstream out_;
    std::size_t flush_every_;
    std::size_t steps_since_flush_ = 0;
    std::size_t written_ = 0;
    std::vector<MetricsRecord> buffer_;
};

} // namespace powernorm

#pragma once

// Experiment commands behind the `powernorm` tool. Each command has a
// settings struct (every field has a default; a flat JSON config file and
// command-line flags override them in that order), a function that runs it
// and writes its artifacts into `out`, and a RunManifest echoing the fully
// resolved settings so the run can be repeated.
//
// Exit codes: 0 success / all checks passed, 1 numeric or check failure,
// 2 usage error (bad flags, bad config, unreadable input).

#include "powernorm/instrumentation.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace powernorm::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// Thrown for anything the caller got wrong; maps to exit code 2.
class UsageError : public Error {
public:
    using Error::Error;
};

// "f64" or "f32". Empty means: POWERNORM_PRECISION if set, else f64.
std::string resolve_precision(const std::string& requested);

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckSettings {
    std::string norm = "bn";     // bn | ln | pnv | pn | layerscale
    std::string sizes = "2x1";   // comma-separated BxD list
    std::uint64_t seed = 1;
    std::uint64_t instances = 1;  // random instances per size
    std::uint64_t pn_steps = 4;   // consecutive steps compared for pn
    std::string out = "runs/gradcheck";
};

struct GradcheckCase {
    std::size_t batch = 0;
    std::size_t dim = 0;
    std::uint64_t instance = 0;
    double max_rel_err = 0;  // finite-difference kinds
    bool bit_identical = false;  // pn
    bool passed = false;
};

struct GradcheckResult {
    std::vector<GradcheckCase> cases;
    bool passed = false;
};

inline constexpr double kGradcheckTolerance = 1e-5;

// ---------------------------------------------------------------------------
// train

struct TrainSettings {
    std::string task = "copy";  // copy | char
    std::string corpus = "data/corpus.txt";

    std::string norm = "ln";  // bn | ln | pnv | pn
    bool layer_scale = false;
    std::uint64_t d_model = 32;
    std::uint64_t n_heads = 2;
    std::uint64_t n_layers = 2;
    std::uint64_t ffn_dim = 64;
    std::uint64_t seed = 1;
    std::optional<std::uint64_t> data_seed;  // defaults to seed
    std::string embedding_init = "normal";   // normal | identity
    double eps = 1e-5;
    double bn_alpha = 0.9;
    double pn_alpha_fwd = 0.9;
    double pn_alpha_bwd = 0.9;
    // psi warmup in optimizer steps; defaults to lr_warmup_steps
    std::optional<std::uint64_t> pn_warmup_steps;

    std::uint64_t total_tokens = 2048;
    std::uint64_t micro_tokens = 2048;
    double lr = 5e-4;
    std::uint64_t lr_warmup_steps = 400;
    std::uint64_t max_steps = 2000;
    double label_smoothing = 0.1;
    double dropout = 0.0;

    std::uint64_t copy_symbols = 8;
    std::uint64_t copy_min_len = 2;
    std::uint64_t copy_max_len = 6;
    std::uint64_t seq_min_len = 16;  // char windows
    std::uint64_t seq_max_len = 64;

    std::uint64_t eval_sentences = 256;
    std::uint64_t eval_every = 0;  // 0: only after the last step
    std::uint64_t metrics_every = 50;  // 0: no instrumentation
    std::string precision;
    std::string out = "runs/train";
};

struct TrainResult {
    std::vector<double> train_loss;  // per step
    double final_eval_loss = 0;
    double final_perplexity = 0;
    std::optional<std::uint64_t> failed_step;  // first non-finite loss
    double seconds = 0;
};

// ---------------------------------------------------------------------------
// stats

struct StatsSettings {
    std::string stream = "gaussian";  // gaussian | zipfian_varlen
    std::string norm = "bn";          // bn | pnv | pn
    std::uint64_t steps = 1000;
    std::uint64_t dim = 16;
    std::uint64_t tokens = 256;
    std::uint64_t seed = 1;
    double mean_offset = 1.0;
    std::uint64_t sentence_len = 32;
    std::uint64_t vocab = 1000;
    double zipf_exponent = 1.1;
    double token_scale = 0.6;
    double sentence_scale = 0.8;
    std::uint64_t min_len = 4;
    std::uint64_t max_len = 64;
    double alpha = 0.9;
    double eps = 1e-5;
    double outlier_factor = 5.0;
    std::string out = "runs/stats";
};

struct StatsSummary {
    // Mean over the second half of the steps; empty when the norm does not
    // define the quantity.
    std::optional<double> plateau_dist_mu;
    std::optional<double> plateau_dist_sigma2;
    std::optional<double> plateau_dist_psi2;
    // Number of steps whose value exceeds outlier_factor x the median.
    std::optional<std::uint64_t> outliers_g_mu;
    std::optional<std::uint64_t> outliers_g_sigma2;
    std::optional<std::uint64_t> outliers_g_psi2;
    std::vector<MetricsRecord> records;
};

// Number of values strictly greater than factor x median.
std::uint64_t count_outliers(std::vector<double> values, double factor);

// ---------------------------------------------------------------------------
// ablate

struct AblateSettings {
    TrainSettings train;
    std::string norms = "bn,ln,pn";
    std::string micro_tokens = "256,512,1024,2048";
    std::string seeds = "1";
    std::string out = "runs/ablate";
};

struct AblateRow {
    std::string norm;
    std::uint64_t micro_tokens = 0;
    std::uint64_t seed = 0;
    double final_eval_loss = 0;
};

struct AblateSpread {
    std::string norm;
    double micro_spread = 0;  // max - min over settings of the seed-mean loss
    double seed_spread = 0;   // mean over settings of max - min over seeds
};

struct AblateResult {
    std::vector<AblateRow> rows;
    std::vector<AblateSpread> spreads;
    bool failed = false;  // some run hit a non-finite loss
};

// ---------------------------------------------------------------------------
// svd

struct SvdSettings {
    std::string checkpoint;
    std::string out = "runs/svd";
};

// ---------------------------------------------------------------------------
// Runners. They validate everything before creating `out`, so a usage
// error leaves nothing behind.

GradcheckResult run_gradcheck(const GradcheckSettings& s);
TrainResult run_train(const TrainSettings& s);
StatsSummary run_stats(const StatsSettings& s);
AblateResult run_ablate(const AblateSettings& s);
void run_svd(const SvdSettings& s);

// Flat JSON echo of settings, as stored in manifests and accepted by
// --config.
std::string settings_json(const GradcheckSettings& s);
std::string settings_json(const TrainSettings& s);
std::string settings_json(const StatsSettings& s);
std::string settings_json(const AblateSettings& s);
std::string settings_json(const SvdSettings& s);

// Full command-line entry point. `args` excludes the program name.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace powernorm::cli

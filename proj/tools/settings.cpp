#include "cli_internal.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <sstream>

namespace powernorm::cli {

std::string resolve_precision(const std::string& requested) {
    std::string p = requested;
    if (p.empty()) {
        const char* env = std::getenv("POWERNORM_PRECISION");
        p = env && *env ? env : "f64";
    }
    if (p != "f64" && p != "f32") throw UsageError("precision must be f64 or f32, got '" + p + "'");
    return p;
}

// ---------------------------------------------------------------------------
// Field tables

const std::vector<Field<GradcheckSettings>>& gradcheck_fields() {
    using S = GradcheckSettings;
    static const std::vector<Field<S>> f{
        field("norm", "bn | ln | pnv | pn | layerscale", &S::norm),
        field("sizes", "comma-separated BxD list, e.g. 2x1,4x3", &S::sizes),
        field("seed", "random seed", &S::seed),
        field("instances", "random instances per size", &S::instances),
        field("pn_steps", "consecutive steps compared for pn", &S::pn_steps),
        field("out", "output directory", &S::out),
    };
    return f;
}

const std::vector<Field<TrainSettings>>& train_fields() {
    using S = TrainSettings;
    static const std::vector<Field<S>> f{
        field("task", "copy | char", &S::task),
        field("corpus", "text file for the char task", &S::corpus),
        field("norm", "bn | ln | pnv | pn", &S::norm),
        field("layer_scale", "layer-scale in front of every norm", &S::layer_scale),
        field("d_model", "model width", &S::d_model),
        field("n_heads", "attention heads", &S::n_heads),
        field("n_layers", "encoder layers", &S::n_layers),
        field("ffn_dim", "feed-forward width", &S::ffn_dim),
        field("seed", "parameter seed (also the data seed unless data_seed is set)", &S::seed),
        field("data_seed", "data sampling seed", &S::data_seed),
        field("embedding_init", "normal | identity", &S::embedding_init),
        field("eps", "normalization epsilon", &S::eps),
        field("bn_alpha", "running-average factor of BN and PN-V", &S::bn_alpha),
        field("pn_alpha_fwd", "PN forward running-average factor", &S::pn_alpha_fwd),
        field("pn_alpha_bwd", "PN backward running-average factor", &S::pn_alpha_bwd),
        field("pn_warmup_steps", "PN warmup in optimizer steps (default lr_warmup_steps)", &S::pn_warmup_steps),
        field("total_tokens", "tokens per optimizer step", &S::total_tokens),
        field("micro_tokens", "tokens per micro-batch", &S::micro_tokens),
        field("lr", "peak learning rate", &S::lr),
        field("lr_warmup_steps", "linear warmup steps", &S::lr_warmup_steps),
        field("max_steps", "optimizer steps", &S::max_steps),
        field("label_smoothing", "label smoothing", &S::label_smoothing),
        field("dropout", "dropout on residual branches", &S::dropout),
        field("copy_symbols", "copy task alphabet size", &S::copy_symbols),
        field("copy_min_len", "shortest copy string", &S::copy_min_len),
        field("copy_max_len", "longest copy string", &S::copy_max_len),
        field("seq_min_len", "shortest char window", &S::seq_min_len),
        field("seq_max_len", "longest char window", &S::seq_max_len),
        field("eval_sentences", "held-out sentences", &S::eval_sentences),
        field("eval_every", "evaluate every N steps (0: only at the end)", &S::eval_every),
        field("metrics_every", "instrument every N steps (0: never)", &S::metrics_every),
        field("precision", "f64 | f32 (default: POWERNORM_PRECISION, else f64)", &S::precision),
        field("out", "output directory", &S::out),
    };
    return f;
}

const std::vector<Field<StatsSettings>>& stats_fields() {
    using S = StatsSettings;
    static const std::vector<Field<S>> f{
        field("stream", "gaussian | zipfian_varlen", &S::stream),
        field("norm", "bn | pnv | pn", &S::norm),
        field("steps", "batches replayed", &S::steps),
        field("dim", "feature dimension", &S::dim),
        field("tokens", "tokens per batch", &S::tokens),
        field("seed", "random seed", &S::seed),
        field("mean_offset", "shared feature mean", &S::mean_offset),
        field("sentence_len", "gaussian sentence length", &S::sentence_len),
        field("vocab", "zipfian vocabulary size", &S::vocab),
        field("zipf_exponent", "Zipf exponent", &S::zipf_exponent),
        field("token_scale", "spread of token embeddings", &S::token_scale),
        field("sentence_scale", "spread of per-sentence offsets", &S::sentence_scale),
        field("min_len", "shortest zipfian sentence", &S::min_len),
        field("max_len", "longest zipfian sentence", &S::max_len),
        field("alpha", "running-average factor", &S::alpha),
        field("eps", "normalization epsilon", &S::eps),
        field("outlier_factor", "outlier threshold as a multiple of the median", &S::outlier_factor),
        field("out", "output directory", &S::out),
    };
    return f;
}

const std::vector<Field<AblateSettings>>& ablate_fields() {
    using S = AblateSettings;
    static const std::vector<Field<S>> f = [] {
        std::vector<Field<S>> v{
            field("norms", "comma-separated norms", &S::norms),
            field("micro_tokens", "comma-separated micro-batch token counts", &S::micro_tokens),
            field("seeds", "comma-separated seeds", &S::seeds),
            field("out", "output directory", &S::out),
        };
        auto t = lift_fields(train_fields(), &S::train, {"norm", "seed", "micro_tokens", "out"});
        v.insert(v.end(), t.begin(), t.end());
        return v;
    }();
    return f;
}

const std::vector<Field<SvdSettings>>& svd_fields() {
    using S = SvdSettings;
    static const std::vector<Field<S>> f{
        field("checkpoint", "checkpoint directory", &S::checkpoint),
        field("out", "output directory", &S::out),
    };
    return f;
}

std::string settings_json(const GradcheckSettings& s) { return settings_to_json(s, gradcheck_fields()).dump(2); }
std::string settings_json(const TrainSettings& s) { return settings_to_json(s, train_fields()).dump(2); }
std::string settings_json(const StatsSettings& s) { return settings_to_json(s, stats_fields()).dump(2); }
std::string settings_json(const AblateSettings& s) { return settings_to_json(s, ablate_fields()).dump(2); }
std::string settings_json(const SvdSettings& s) { return settings_to_json(s, svd_fields()).dump(2); }

// ---------------------------------------------------------------------------
// Field conversion

std::string flag_name(const std::string& key) {
    std::string f = "--" + key;
    std::replace(f.begin(), f.end(), '_', '-');
    return f;
}

namespace {

std::uint64_t parse_u64(const std::string& key, const std::string& text) {
    std::uint64_t v = 0;
    const char* end = text.data() + text.size();
    auto [p, ec] = std::from_chars(text.data(), end, v);
    if (text.empty() || ec != std::errc() || p != end) {
        throw UsageError(flag_name(key) + ": expected a non-negative integer, got '" + text + "'");
    }
    return v;
}

double parse_double(const std::string& key, const std::string& text) {
    double v = 0;
    const char* end = text.data() + text.size();
    auto [p, ec] = std::from_chars(text.data(), end, v);
    if (text.empty() || ec != std::errc() || p != end) {
        throw UsageError(flag_name(key) + ": expected a number, got '" + text + "'");
    }
    return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
    if (text == "true" || text == "1" || text.empty()) return true;
    if (text == "false" || text == "0") return false;
    throw UsageError(flag_name(key) + ": expected true or false, got '" + text + "'");
}

} // namespace

void set_from_text(const FieldRef& ref, const std::string& key, const std::string& text) {
    std::visit(
        [&](auto* p) {
            using M = std::remove_pointer_t<decltype(p)>;
            if constexpr (std::is_same_v<M, std::string>) *p = text;
            else if constexpr (std::is_same_v<M, bool>) *p = parse_bool(key, text);
            else if constexpr (std::is_same_v<M, double>) *p = parse_double(key, text);
            else if constexpr (std::is_same_v<M, std::uint64_t>) *p = parse_u64(key, text);
            else *p = parse_u64(key, text);
        },
        ref);
}

void set_from_json(const FieldRef& ref, const std::string& key, const ordered_json& v) {
    auto bad = [&](const char* want) {
        return UsageError("config key '" + key + "': expected " + want + ", got " + v.dump());
    };
    std::visit(
        [&](auto* p) {
            using M = std::remove_pointer_t<decltype(p)>;
            if constexpr (std::is_same_v<M, std::string>) {
                if (!v.is_string()) throw bad("a string");
                *p = v.get<std::string>();
            } else if constexpr (std::is_same_v<M, bool>) {
                if (!v.is_boolean()) throw bad("true or false");
                *p = v.get<bool>();
            } else if constexpr (std::is_same_v<M, double>) {
                if (!v.is_number()) throw bad("a number");
                *p = v.get<double>();
            } else if constexpr (std::is_same_v<M, std::uint64_t>) {
                if (!v.is_number_unsigned()) throw bad("a non-negative integer");
                *p = v.get<std::uint64_t>();
            } else {
                if (v.is_null()) {
                    p->reset();
                } else {
                    if (!v.is_number_unsigned()) throw bad("a non-negative integer or null");
                    *p = v.get<std::uint64_t>();
                }
            }
        },
        ref);
}

ordered_json field_to_json(const FieldRef& ref) {
    return std::visit(
        [](auto* p) -> ordered_json {
            using M = std::remove_pointer_t<decltype(p)>;
            if constexpr (std::is_same_v<M, std::optional<std::uint64_t>>) {
                return *p ? ordered_json(**p) : ordered_json(nullptr);
            } else {
                return ordered_json(*p);
            }
        },
        ref);
}

ordered_json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return ordered_json::parse(ss.str());
    } catch (const nlohmann::json::exception& e) {
        throw UsageError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Lists

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != ' ') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

std::vector<std::uint64_t> parse_u64_list(const std::string& text, const std::string& what) {
    std::vector<std::uint64_t> out;
    for (const auto& item : split_list(text)) out.push_back(parse_u64(what, item));
    return out;
}

std::vector<std::pair<std::size_t, std::size_t>> parse_sizes(const std::string& text) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (const auto& item : split_list(text)) {
        const auto x = item.find('x');
        if (x == std::string::npos) throw UsageError("--sizes: expected BxD, got '" + item + "'");
        const auto B = parse_u64("sizes", item.substr(0, x));
        const auto D = parse_u64("sizes", item.substr(x + 1));
        if (B == 0 || D == 0) throw UsageError("--sizes: B and D must be >= 1, got '" + item + "'");
        if (B > 4096 || D > 4096) throw UsageError("--sizes: B and D must be <= 4096, got '" + item + "'");
        out.emplace_back(B, D);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Output

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
    if (!out) throw Error("write failed: " + path.string());
}

std::string utc_timestamp(std::chrono::system_clock::time_point t) {
    const std::time_t tt = std::chrono::system_clock::to_time_t(t);
    std::tm tm{};
    gmtime_r(&tt, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::filesystem::path write_manifest(const std::filesystem::path& out, const Manifest& m) {
    ordered_json j;
    j["command"] = m.command;
    j["config"] = m.config;
    j["seed"] = m.seed;
    j["precision"] = m.precision;
    j["code_version"] = POWERNORM_VERSION;
    j["start_time"] = utc_timestamp(m.start);
    j["end_time"] = utc_timestamp(std::chrono::system_clock::now());
    ordered_json files = ordered_json::array();
    for (const auto& p : m.outputs) files.push_back(p.generic_string());
    j["outputs"] = files;
    const auto path = out / "manifest.json";
    write_text_file(path, j.dump(2) + "\n");
    return path;
}

void prepare_out_dir(const std::filesystem::path& out) {
    if (out.empty()) throw UsageError("--out must not be empty");
    if (std::filesystem::exists(out) && !std::filesystem::is_directory(out)) {
        throw UsageError("--out " + out.string() + " exists and is not a directory");
    }
    std::filesystem::create_directories(out);
}

} // namespace powernorm::cli

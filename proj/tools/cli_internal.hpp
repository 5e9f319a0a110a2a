#pragma once

// Plumbing shared by the command implementations.

#include "powernorm/cli.hpp"

#include "json.hpp"

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <variant>
#include <vector>

namespace CLI {
class App;
}

namespace powernorm::cli {

using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Settings fields: one table per settings struct drives the JSON config,
// the command-line flags and the manifest echo.

using FieldRef = std::variant<std::string*, bool*, double*, std::uint64_t*, std::optional<std::uint64_t>*>;

template <class S>
struct Field {
    std::string key;  // JSON key; the flag is --key with '_' -> '-'
    std::string help;
    std::function<FieldRef(S&)> ref;
};

template <class S, class M>
Field<S> field(std::string key, std::string help, M S::*member) {
    return {std::move(key), std::move(help), [member](S& s) -> FieldRef { return &(s.*member); }};
}

// Fields of Inner exposed on Outer through `sub`, skipping `exclude`.
template <class Outer, class Inner>
std::vector<Field<Outer>> lift_fields(const std::vector<Field<Inner>>& inner, Inner Outer::*sub,
                                      const std::vector<std::string>& exclude) {
    std::vector<Field<Outer>> out;
    for (const auto& f : inner) {
        if (std::find(exclude.begin(), exclude.end(), f.key) != exclude.end()) continue;
        auto ref = f.ref;
        out.push_back({f.key, f.help, [ref, sub](Outer& o) { return ref(o.*sub); }});
    }
    return out;
}

const std::vector<Field<GradcheckSettings>>& gradcheck_fields();
const std::vector<Field<TrainSettings>>& train_fields();
const std::vector<Field<StatsSettings>>& stats_fields();
const std::vector<Field<AblateSettings>>& ablate_fields();
const std::vector<Field<SvdSettings>>& svd_fields();

std::string flag_name(const std::string& key);

// Sets one field from its command-line text. Throws UsageError.
void set_from_text(const FieldRef& ref, const std::string& key, const std::string& text);
// Sets one field from JSON. Throws UsageError.
void set_from_json(const FieldRef& ref, const std::string& key, const ordered_json& v);
ordered_json field_to_json(const FieldRef& ref);

template <class S>
ordered_json settings_to_json(const S& s, const std::vector<Field<S>>& fields) {
    S copy = s;
    ordered_json j = ordered_json::object();
    for (const auto& f : fields) j[f.key] = field_to_json(f.ref(copy));
    return j;
}

// Applies a flat JSON object; unknown keys are usage errors.
template <class S>
void apply_json(S& s, const ordered_json& j, const std::vector<Field<S>>& fields) {
    if (!j.is_object()) throw UsageError("config must be a flat JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        auto f = std::find_if(fields.begin(), fields.end(), [&](const auto& x) { return x.key == it.key(); });
        if (f == fields.end()) throw UsageError("unknown config key '" + it.key() + "'");
        set_from_json(f->ref(s), it.key(), it.value());
    }
}

ordered_json read_json_file(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Parsing helpers

std::vector<std::string> split_list(const std::string& text);
std::vector<std::uint64_t> parse_u64_list(const std::string& text, const std::string& what);
std::vector<std::pair<std::size_t, std::size_t>> parse_sizes(const std::string& text);

// ---------------------------------------------------------------------------
// Output

void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string utc_timestamp(std::chrono::system_clock::time_point t);

struct Manifest {
    std::string command;
    ordered_json config;
    std::uint64_t seed = 0;
    std::string precision = "f64";
    std::chrono::system_clock::time_point start;
    std::vector<std::filesystem::path> outputs;
};

// Writes <out>/manifest.json with end time = now.
std::filesystem::path write_manifest(const std::filesystem::path& out, const Manifest& m);

// Everything run_train checks before it writes. Throws UsageError.
void validate_train_settings(const TrainSettings& s);

// Creates `out`, refusing to write into an existing regular file.
void prepare_out_dir(const std::filesystem::path& out);

} // namespace powernorm::cli

#include "cli_internal.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <iostream>
#include <map>

namespace powernorm::cli {

namespace {

// Flags of one subcommand, bound to raw text until parsing is done.
template <class S>
struct Bound {
    const std::vector<Field<S>>* fields = nullptr;
    CLI::App* app = nullptr;
    std::map<std::string, std::string> raw;
    std::string config;

    void attach(CLI::App* sub, const std::vector<Field<S>>& f) {
        app = sub;
        fields = &f;
        sub->add_option("--config", config, "flat JSON config; flags override its values");
        S defaults;
        for (const auto& fd : f) {
            const bool is_bool = std::holds_alternative<bool*>(fd.ref(defaults));
            const std::string def = field_to_json(fd.ref(defaults)).dump();
            const std::string help = fd.help + " [default: " + def + "]";
            if (is_bool) {
                sub->add_flag(flag_name(fd.key) + "{true}", raw[fd.key], help);
            } else {
                sub->add_option(flag_name(fd.key), raw[fd.key], help);
            }
        }
    }

    S resolve() const {
        S s;
        if (!config.empty()) apply_json(s, read_json_file(config), *fields);
        for (const auto& fd : *fields) {
            if (app->get_option(flag_name(fd.key))->count() > 0) set_from_text(fd.ref(s), fd.key, raw.at(fd.key));
        }
        return s;
    }
};

int exit_gradcheck(const GradcheckSettings& s, std::ostream& out) {
    const auto r = run_gradcheck(s);
    std::size_t passed = 0;
    for (const auto& c : r.cases) passed += c.passed;
    out << "gradcheck " << s.norm << ": " << passed << "/" << r.cases.size() << " cases passed\n";
    return r.passed ? kExitOk : kExitFailure;
}

int exit_train(const TrainSettings& s, std::ostream& out, std::ostream& err) {
    const auto r = run_train(s);
    if (r.failed_step) {
        err << "train: non-finite loss at step " << *r.failed_step << "\n";
        return kExitFailure;
    }
    out << "train " << s.norm << ": final eval loss " << format_number(r.final_eval_loss) << " (perplexity "
        << format_number(r.final_perplexity) << ")\n";
    return kExitOk;
}

int exit_stats(const StatsSettings& s, std::ostream& out) {
    const auto r = run_stats(s);
    out << "stats " << s.stream << "/" << s.norm << ": " << r.records.size() << " steps";
    if (r.plateau_dist_sigma2) out << ", dist_sigma2 plateau " << format_number(*r.plateau_dist_sigma2);
    if (r.plateau_dist_psi2) out << ", dist_psi2 plateau " << format_number(*r.plateau_dist_psi2);
    if (r.outliers_g_sigma2) out << ", g_sigma2 outliers " << *r.outliers_g_sigma2;
    if (r.outliers_g_psi2) out << ", g_psi2 outliers " << *r.outliers_g_psi2;
    out << "\n";
    return kExitOk;
}

int exit_ablate(const AblateSettings& s, std::ostream& out, std::ostream& err) {
    const auto r = run_ablate(s);
    for (const auto& sp : r.spreads) {
        out << "ablate " << sp.norm << ": spread across micro-batch sizes " << format_number(sp.micro_spread)
            << ", seed spread " << format_number(sp.seed_spread) << "\n";
    }
    if (r.failed) err << "ablate: at least one run hit a non-finite loss\n";
    return r.failed ? kExitFailure : kExitOk;
}

int exit_svd(const SvdSettings& s, std::ostream& out) {
    run_svd(s);
    out << "svd: wrote " << (std::filesystem::path(s.out) / "spectrum.csv").string() << "\n";
    return kExitOk;
}

template <class S>
S from_manifest_config(const ordered_json& cfg, const std::vector<Field<S>>& fields, const std::string& out) {
    S s;
    apply_json(s, cfg, fields);
    if (!out.empty()) s.out = out;
    return s;
}

int rerun(const std::string& manifest, const std::string& out_dir, std::ostream& out, std::ostream& err) {
    const auto m = read_json_file(manifest);
    if (!m.is_object() || !m.contains("command") || !m.contains("config") || !m["command"].is_string()) {
        throw UsageError(manifest + ": not a run manifest");
    }
    const auto cmd = m["command"].get<std::string>();
    const auto& cfg = m["config"];
    if (cmd == "gradcheck") return exit_gradcheck(from_manifest_config(cfg, gradcheck_fields(), out_dir), out);
    if (cmd == "train") return exit_train(from_manifest_config(cfg, train_fields(), out_dir), out, err);
    if (cmd == "stats") return exit_stats(from_manifest_config(cfg, stats_fields(), out_dir), out);
    if (cmd == "ablate") return exit_ablate(from_manifest_config(cfg, ablate_fields(), out_dir), out, err);
    if (cmd == "svd") return exit_svd(from_manifest_config(cfg, svd_fields(), out_dir), out);
    throw UsageError(manifest + ": unknown command '" + cmd + "'");
}

} // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Normalization-layer experiments: gradient checks, training, statistics replay, ablations, SVD"};
    app.name("powernorm");
    app.require_subcommand(1);

    Bound<GradcheckSettings> gradcheck;
    Bound<TrainSettings> train;
    Bound<StatsSettings> stats;
    Bound<AblateSettings> ablate;
    Bound<SvdSettings> svd;
    gradcheck.attach(app.add_subcommand("gradcheck", "check backward passes against independent oracles"),
                     gradcheck_fields());
    train.attach(app.add_subcommand("train", "train the toy transformer"), train_fields());
    stats.attach(app.add_subcommand("stats", "replay a synthetic stream through one normalization layer"),
                 stats_fields());
    ablate.attach(app.add_subcommand("ablate", "train across micro-batch sizes at a fixed total batch"),
                  ablate_fields());
    svd.attach(app.add_subcommand("svd", "singular values of a checkpoint's token embedding"), svd_fields());

    std::string manifest, rerun_out;
    auto* rerun_cmd = app.add_subcommand("rerun", "repeat a run from its manifest");
    rerun_cmd->add_option("--manifest", manifest, "manifest.json of the earlier run")->required();
    rerun_cmd->add_option("--out", rerun_out, "output directory (default: the manifest's)");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n";
        const auto subs = app.get_subcommands();
        err << (subs.empty() ? app.help() : subs.front()->help());
        return kExitUsage;
    }

    try {
        if (gradcheck.app->parsed()) return exit_gradcheck(gradcheck.resolve(), out);
        if (train.app->parsed()) return exit_train(train.resolve(), out, err);
        if (stats.app->parsed()) return exit_stats(stats.resolve(), out);
        if (ablate.app->parsed()) {
            AblateSettings s = ablate.resolve();
            return exit_ablate(s, out, err);
        }
        if (svd.app->parsed()) return exit_svd(svd.resolve(), out);
        if (rerun_cmd->parsed()) return rerun(manifest, rerun_out, out, err);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitUsage;
}

} // namespace powernorm::cli

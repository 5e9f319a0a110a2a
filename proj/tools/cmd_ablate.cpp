#include "cli_internal.hpp"

#include "powernorm/analysis.hpp"
#include "powernorm/toymodel.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace powernorm::cli {

AblateResult run_ablate(const AblateSettings& s) {
    const auto norms = split_list(s.norms);
    for (const auto& n : norms) {
        if (n != "bn" && n != "ln" && n != "pnv" && n != "pn") throw UsageError("--norms: unknown norm '" + n + "'");
    }
    const auto micro = parse_u64_list(s.micro_tokens, "micro_tokens");
    const auto seeds = parse_u64_list(s.seeds, "seeds");
    for (auto m : micro) {
        if (m == 0 || s.train.total_tokens % m != 0) {
            throw UsageError("--micro-tokens: " + std::to_string(m) + " does not divide --total-tokens " +
                             std::to_string(s.train.total_tokens));
        }
    }
    if (norms.empty() || micro.empty() || seeds.empty()) throw UsageError("ablate needs norms, micro tokens and seeds");
    for (const auto& n : norms) {
        for (auto m : micro) {
            TrainSettings t = s.train;
            t.norm = n;
            t.micro_tokens = m;
            validate_train_settings(t);
        }
    }

    const auto start = std::chrono::system_clock::now();
    const std::filesystem::path out(s.out);
    prepare_out_dir(out);

    AblateResult res;
    std::vector<std::filesystem::path> outputs;
    std::string csv = "norm,micro_tokens,seed,final_eval_loss\n";
    for (const auto& n : norms) {
        for (auto m : micro) {
            for (auto seed : seeds) {
                TrainSettings t = s.train;
                t.norm = n;
                t.micro_tokens = m;
                t.seed = seed;
                t.out = (out / (n + "_m" + std::to_string(m) + "_s" + std::to_string(seed))).string();
                const auto r = run_train(t);
                res.failed = res.failed || r.failed_step.has_value();
                res.rows.push_back({n, m, seed, r.final_eval_loss});
                csv += n + "," + std::to_string(m) + "," + std::to_string(seed) + "," +
                       format_number(r.final_eval_loss) + "\n";
                outputs.push_back(std::filesystem::path(t.out) / "manifest.json");
            }
        }
    }

    std::string spread_csv = "norm,micro_spread,seed_spread\n";
    for (const auto& n : norms) {
        std::vector<double> means;
        double seed_spread = 0;
        for (auto m : micro) {
            double sum = 0, lo = INFINITY, hi = -INFINITY;
            for (const auto& row : res.rows) {
                if (row.norm != n || row.micro_tokens != m) continue;
                sum += row.final_eval_loss;
                lo = std::min(lo, row.final_eval_loss);
                hi = std::max(hi, row.final_eval_loss);
            }
            means.push_back(sum / static_cast<double>(seeds.size()));
            seed_spread += hi - lo;
        }
        const auto [mn, mx] = std::minmax_element(means.begin(), means.end());
        AblateSpread sp{n, *mx - *mn, seed_spread / static_cast<double>(micro.size())};
        res.spreads.push_back(sp);
        spread_csv += n + "," + format_number(sp.micro_spread) + "," + format_number(sp.seed_spread) + "\n";
    }
    write_text_file(out / "ablate.csv", csv);
    write_text_file(out / "spread.csv", spread_csv);
    outputs.insert(outputs.begin(), {out / "ablate.csv", out / "spread.csv"});

    Manifest mf{"ablate", settings_to_json(s, ablate_fields()), seeds.front(),
                resolve_precision(s.train.precision), start, outputs};
    write_manifest(out, mf);
    return res;
}

void run_svd(const SvdSettings& s) {
    if (s.checkpoint.empty()) throw UsageError("--checkpoint is required");
    if (!std::filesystem::exists(std::filesystem::path(s.checkpoint) / "checkpoint.json")) {
        throw UsageError("no checkpoint.json in " + s.checkpoint);
    }
    const auto start = std::chrono::system_clock::now();
    Model<double> model = [&] {
        try {
            return load_checkpoint<double>(s.checkpoint);
        } catch (const FormatError& e) {
            throw UsageError(e.what());
        }
    }();
    const auto report = embedding_spectrum(model.token_embedding());

    const std::filesystem::path out(s.out);
    prepare_out_dir(out);
    write_text_file(out / "spectrum.csv", spectrum_csv(report));
    Manifest m{"svd", settings_to_json(s, svd_fields()), model.config().seed, "f64", start, {out / "spectrum.csv"}};
    write_manifest(out, m);
}

} // namespace powernorm::cli

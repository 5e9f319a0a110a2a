#include "cli_internal.hpp"

#include "powernorm/tasks.hpp"
#include "powernorm/toymodel.hpp"

#include <chrono>
#include <cmath>
#include <memory>

namespace powernorm::cli {

namespace {

// Data source of a run: copy task or character corpus.
struct TrainData {
    std::unique_ptr<CopyTask> copy;
    std::unique_ptr<CharCorpus> chars;
    std::size_t seq_min = 0, seq_max = 0;
    std::vector<Sequence> eval;

    std::size_t vocab() const { return copy ? copy->vocab_size() : chars->vocab_size(); }
    std::size_t longest() const { return copy ? copy->longest_sequence() : seq_max; }

    std::vector<Sequence> sample(std::size_t tokens, std::mt19937_64& rng) const {
        return copy ? copy->sample_tokens(tokens, rng) : chars->sample_tokens(tokens, seq_min, seq_max, rng);
    }
};

struct ResolvedTrain {
    ModelConfig model;
    TrainConfig train;
    std::uint64_t data_seed = 0;
    std::string precision;
    TrainData data;
};

ResolvedTrain resolve(const TrainSettings& s) {
    ResolvedTrain r;
    r.precision = resolve_precision(s.precision);
    r.data_seed = s.data_seed.value_or(s.seed);

    try {
        if (s.task == "copy") {
            r.data.copy = std::make_unique<CopyTask>(CopyTaskConfig{s.copy_symbols, s.copy_min_len, s.copy_max_len});
            r.data.eval = r.data.copy->eval_set(s.eval_sentences, r.data_seed ^ 0x5EEDE7A1ull);
        } else if (s.task == "char") {
            if (s.seq_min_len == 0 || s.seq_min_len > s.seq_max_len) {
                throw UsageError("need 1 <= seq_min_len <= seq_max_len");
            }
            r.data.chars = std::make_unique<CharCorpus>(CharCorpus::from_file(s.corpus));
            r.data.seq_min = s.seq_min_len;
            r.data.seq_max = s.seq_max_len;
            r.data.eval = r.data.chars->eval_set(s.seq_max_len, s.eval_sentences);
        } else {
            throw UsageError("--task must be copy or char, got '" + s.task + "'");
        }
        if (r.data.eval.empty()) throw UsageError("evaluation set is empty");

        ModelConfig& m = r.model;
        m.vocab_size = r.data.vocab();
        m.d_model = s.d_model;
        m.n_heads = s.n_heads;
        m.n_layers = s.n_layers;
        m.ffn_dim = s.ffn_dim;
        m.norm_kind = parse_norm_kind(s.norm);
        m.layer_scale_enabled = s.layer_scale;
        m.seed = s.seed;
        m.max_len = r.data.longest();
        m.causal = s.task == "char";
        if (s.embedding_init != "normal" && s.embedding_init != "identity") {
            throw UsageError("--embedding-init must be normal or identity");
        }
        m.embedding_init = s.embedding_init == "identity" ? EmbeddingInit::Identity : EmbeddingInit::Normal;
        m.eps = s.eps;
        m.bn_alpha = s.bn_alpha;
        m.pn_alpha_fwd = s.pn_alpha_fwd;
        m.pn_alpha_bwd = s.pn_alpha_bwd;

        TrainConfig& t = r.train;
        t.total_tokens_per_step = s.total_tokens;
        t.micro_batch_tokens = s.micro_tokens;
        t.lr = s.lr;
        t.lr_warmup_steps = s.lr_warmup_steps;
        t.max_steps = s.max_steps;
        t.label_smoothing = s.label_smoothing;
        t.dropout = s.dropout;
        t.validate();
        // The psi warmup counts forward passes, so it scales with the
        // number of micro-batches per optimizer step.
        m.pn_warmup_steps = s.pn_warmup_steps.value_or(s.lr_warmup_steps) * t.accumulation_count();
        m.validate();
    } catch (const InvalidConfig& e) {
        throw UsageError(e.what());
    } catch (const EmptyCorpus& e) {
        throw UsageError(e.what());
    }
    return r;
}

std::string log_row(std::uint64_t step, double lr, double loss, std::size_t tokens, std::optional<double> eval) {
    return std::to_string(step) + "," + format_number(lr) + "," + format_number(loss) + "," + std::to_string(tokens) +
           "," + (eval ? format_number(*eval) : std::string()) + "\n";
}

template <Real T>
TrainResult train_impl(const TrainSettings& s, ResolvedTrain& r, const std::filesystem::path& out,
                       std::vector<std::filesystem::path>& outputs) {
    const auto t0 = std::chrono::steady_clock::now();
    TrainResult res;
    Model<T> model(r.model);
    Adam<T> opt(model, r.train);
    const std::size_t groups = r.train.accumulation_count();

    std::string log = "step,lr,train_loss,tokens,eval_loss\n";
    std::unique_ptr<MetricsRecorder> recorder;
    if (s.metrics_every > 0) {
        recorder = std::make_unique<MetricsRecorder>(out / "metrics.csv", 10);
        outputs.push_back(out / "metrics.csv");
    }

    for (std::uint64_t step = 1; step <= s.max_steps; ++step) {
        std::seed_seq seq{r.data_seed, step};
        std::mt19937_64 rng(seq);
        const auto sentences = r.data.sample(s.total_tokens, rng);
        const auto micro = split_micro_batches(sentences, groups);
        const bool collect = recorder && step % s.metrics_every == 0;
        const auto sr = train_step(model, opt, micro, r.train, step, collect);
        res.train_loss.push_back(sr.loss);
        if (collect) {
            for (auto& rec : sr.metrics) recorder->record(rec);
            recorder->step_done();
        }
        std::optional<double> eval;
        if (!std::isfinite(sr.loss)) {
            res.failed_step = step;
            log += log_row(step, sr.lr, sr.loss, sr.tokens, eval);
            break;
        }
        if (step == s.max_steps || (s.eval_every > 0 && step % s.eval_every == 0)) {
            eval = evaluate(model, r.data.eval).mean_loss;
        }
        log += log_row(step, sr.lr, sr.loss, sr.tokens, eval);
    }
    if (recorder) recorder->flush();
    write_text_file(out / "train_log.csv", log);
    outputs.push_back(out / "train_log.csv");

    ordered_json summary;
    summary["norm"] = s.norm;
    summary["steps_completed"] = res.train_loss.size() - (res.failed_step ? 1 : 0);
    if (res.failed_step) {
        summary["failed_step"] = *res.failed_step;
        res.final_eval_loss = std::nan("");
        res.final_perplexity = std::nan("");
    } else {
        const auto ev = evaluate(model, r.data.eval);
        res.final_eval_loss = ev.mean_loss;
        res.final_perplexity = ev.perplexity;
        summary["failed_step"] = nullptr;
        summary["final_train_loss"] = res.train_loss.empty() ? nullptr : ordered_json(res.train_loss.back());
        summary["final_eval_loss"] = ev.mean_loss;
        summary["final_perplexity"] = ev.perplexity;
        summary["eval_tokens"] = ev.tokens;
        save_checkpoint(model, out / "checkpoint", s.max_steps);
        outputs.push_back(out / "checkpoint" / "checkpoint.json");
        outputs.push_back(out / "checkpoint" / "params.bin");
        outputs.push_back(out / "checkpoint" / "norm_state.bin");
        outputs.push_back(out / "checkpoint" / "norm_state.json");
    }
    summary["parameter_count"] = model.parameter_count();
    write_text_file(out / "summary.json", summary.dump(2) + "\n");
    outputs.push_back(out / "summary.json");
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

} // namespace

void validate_train_settings(const TrainSettings& s) { resolve(s); }

TrainResult run_train(const TrainSettings& s) {
    auto r = resolve(s);
    const auto start = std::chrono::system_clock::now();
    const std::filesystem::path out(s.out);
    prepare_out_dir(out);

    std::vector<std::filesystem::path> outputs;
    TrainResult res = r.precision == "f32" ? train_impl<float>(s, r, out, outputs)
                                           : train_impl<double>(s, r, out, outputs);

    // Echo with every default made explicit so a rerun does not depend on
    // the environment.
    TrainSettings echo = s;
    echo.precision = r.precision;
    echo.data_seed = r.data_seed;
    if (!echo.pn_warmup_steps) echo.pn_warmup_steps = s.lr_warmup_steps;
    Manifest m{"train", settings_to_json(echo, train_fields()), s.seed, r.precision, start, outputs};
    write_manifest(out, m);
    return res;
}

} // namespace powernorm::cli

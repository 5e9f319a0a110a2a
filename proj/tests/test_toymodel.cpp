#include "powernorm/tasks.hpp"
#include "powernorm/toymodel.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>

using namespace powernorm;
using powernorm::testing::relative_error;

namespace {

ModelConfig small_config(NormKind kind, std::uint64_t seed = 7) {
    ModelConfig cfg;
    cfg.vocab_size = 6;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_layers = 1;
    cfg.ffn_dim = 12;
    cfg.norm_kind = kind;
    cfg.seed = seed;
    cfg.max_len = 16;
    return cfg;
}

std::vector<Sequence> random_sequences(std::size_t n, std::size_t min_len, std::size_t max_len,
                                       std::size_t vocab, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> len(min_len, max_len);
    std::uniform_int_distribution<int> tok(0, static_cast<int>(vocab) - 1);
    std::vector<Sequence> out;
    for (std::size_t i = 0; i < n; ++i) {
        Sequence s;
        const std::size_t L = len(rng);
        for (std::size_t p = 0; p < L; ++p) {
            s.tokens.push_back(tok(rng));
            s.targets.push_back(p % 3 == 2 ? kIgnoreTarget : tok(rng));
        }
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<double> flat_values(Model<double>& m) {
    std::vector<double> v;
    for (const auto& p : m.parameters()) v.insert(v.end(), p.value.begin(), p.value.end());
    return v;
}

std::vector<double> flat_grads(Model<double>& m) {
    std::vector<double> v;
    for (const auto& p : m.parameters()) v.insert(v.end(), p.grad.begin(), p.grad.end());
    return v;
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
    EXPECT_EQ(a.size(), b.size());
    double m = 0;
    for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a[k] - b[k]));
    return m;
}

TrainConfig plain_train(double lr = 1e-3) {
    TrainConfig t;
    t.total_tokens_per_step = 64;
    t.micro_batch_tokens = 64;
    t.lr = lr;
    t.lr_warmup_steps = 0;
    t.label_smoothing = 0.1;
    return t;
}

} // namespace

// ---------------------------------------------------------------------------
// Configs and schedule

TEST(Config, RejectsBadModelConfigs) {
    auto cfg = small_config(NormKind::LN);
    cfg.n_heads = 3;
    EXPECT_THROW(Model<double>{cfg}, InvalidConfig);
    cfg = small_config(NormKind::LN);
    cfg.vocab_size = 0;
    EXPECT_THROW(Model<double>{cfg}, InvalidConfig);
    cfg = small_config(NormKind::PN);
    cfg.pn_alpha_fwd = 1.5;
    EXPECT_THROW(Model<double>{cfg}, InvalidConfig);
}

TEST(Config, MicroBatchMustDivideTotal) {
    TrainConfig t;
    t.total_tokens_per_step = 2048;
    t.micro_batch_tokens = 768;
    EXPECT_THROW(t.validate(), InvalidConfig);
    t.micro_batch_tokens = 512;
    EXPECT_NO_THROW(t.validate());
    EXPECT_EQ(t.accumulation_count(), 4u);
}

TEST(Schedule, WarmupThenInverseSqrt) {
    TrainConfig t;
    t.lr = 1e-3;
    t.lr_warmup_steps = 100;
    EXPECT_DOUBLE_EQ(learning_rate(t, 1), 1e-5);
    EXPECT_DOUBLE_EQ(learning_rate(t, 50), 5e-4);
    EXPECT_DOUBLE_EQ(learning_rate(t, 100), 1e-3);
    EXPECT_DOUBLE_EQ(learning_rate(t, 400), 5e-4);
    t.lr_warmup_steps = 0;
    EXPECT_DOUBLE_EQ(learning_rate(t, 1), 1e-3);
    EXPECT_DOUBLE_EQ(learning_rate(t, 5000), 1e-3);
}

// ---------------------------------------------------------------------------
// Construction

TEST(Build, SameSeedGivesIdenticalParameters) {
    for (auto kind : {NormKind::BN, NormKind::LN, NormKind::PNV, NormKind::PN}) {
        Model<double> a(small_config(kind, 3));
        Model<double> b(small_config(kind, 3));
        Model<double> c(small_config(kind, 4));
        EXPECT_EQ(flat_values(a), flat_values(b));
        EXPECT_NE(flat_values(a), flat_values(c));
    }
}

TEST(Build, ParameterCountAuditAcrossNormKinds) {
    auto cfg = small_config(NormKind::LN);
    cfg.n_layers = 2;
    const std::size_t V = cfg.vocab_size, d = cfg.d_model, f = cfg.ffn_dim, L = cfg.n_layers;
    const std::size_t sites = 2 * L + 1;
    const std::size_t per_layer = 4 * (d * d + d) + 2 * (2 * d) + (d * f + f) + (f * d + d);
    const std::size_t expected = V * d + cfg.max_len * d + L * per_layer + 2 * d + (d * V + V);

    std::map<NormKind, std::size_t> state{
        {NormKind::LN, 0}, {NormKind::BN, 2 * d}, {NormKind::PNV, d}, {NormKind::PN, 2 * d}};
    for (auto [kind, per_site] : state) {
        cfg.norm_kind = kind;
        Model<double> m(cfg);
        EXPECT_EQ(m.parameter_count(), expected) << to_string(kind);
        EXPECT_EQ(m.norm_state_size(), sites * per_site) << to_string(kind);
    }
    cfg.layer_scale_enabled = true;
    Model<double> ls(cfg);
    EXPECT_EQ(ls.parameter_count(), expected + sites * d);
}

TEST(Build, ZeroLayersIsEmbeddingPlusProjection) {
    auto cfg = small_config(NormKind::BN);
    cfg.n_layers = 0;
    Model<double> m(cfg);
    std::vector<std::string> names;
    for (const auto& p : m.parameters()) names.push_back(p.name);
    EXPECT_EQ(names, (std::vector<std::string>{"tok_emb", "pos_emb", "out.w", "out.b"}));
    EXPECT_TRUE(m.norm_sites().empty());

    const auto seqs = random_sequences(3, 2, 5, cfg.vocab_size, 1);
    const auto batch = TokenBatch::from_sequences(seqs);
    const auto fp = m.forward(batch, Mode::Training);
    auto params = m.parameters();
    const auto& tok = params[0];
    const auto& pos = params[1];
    const auto& w = params[2];
    const auto& b = params[3];
    const std::size_t d = cfg.d_model, V = cfg.vocab_size;
    std::size_t r = 0;
    for (const auto& s : seqs) {
        for (std::size_t p = 0; p < s.tokens.size(); ++p, ++r) {
            for (std::size_t v = 0; v < V; ++v) {
                double acc = 0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double h = tok.value[static_cast<std::size_t>(s.tokens[p]) * d + j] + pos.value[p * d + j];
                    acc += h * w.value[j * V + v];
                }
                EXPECT_NEAR(fp.logits(r, v), acc + b.value[v], 1e-12);
            }
        }
    }
    EXPECT_EQ(r, fp.logits.rows());
}

TEST(Build, IdentityEmbeddingInit) {
    auto cfg = small_config(NormKind::LN);
    cfg.embedding_init = EmbeddingInit::Identity;
    Model<double> m(cfg);
    const auto& E = m.token_embedding();
    for (std::size_t i = 0; i < E.rows(); ++i)
        for (std::size_t j = 0; j < E.cols(); ++j) EXPECT_EQ(E(i, j), i == j ? 1.0 : 0.0);
}

// ---------------------------------------------------------------------------
// Batches

TEST(Batches, PaddingLayoutAndCounts) {
    std::vector<Sequence> seqs{{{1, 2, 3}, {2, kIgnoreTarget, 4}}, {{5}, {0}}};
    const auto b = TokenBatch::from_sequences(seqs, 5);
    EXPECT_EQ(b.max_len, 5u);
    EXPECT_EQ(b.token_count(), 4u);
    EXPECT_EQ(b.target_count(), 3u);
    EXPECT_EQ(b.targets[3], kIgnoreTarget);
    EXPECT_EQ(b.tokens[5], 5);
}

TEST(Batches, SplitKeepsOrderAndBalancesTokens) {
    const auto seqs = random_sequences(20, 3, 9, 6, 2);
    const auto groups = split_micro_batches(seqs, 4);
    ASSERT_EQ(groups.size(), 4u);
    std::size_t total = 0, sentences = 0;
    for (const auto& g : groups) {
        EXPECT_GE(g.num_sentences, 1u);
        for (std::size_t s = 0; s < g.num_sentences; ++s, ++sentences) {
            EXPECT_EQ(g.lengths[s], seqs[sentences].tokens.size());
            EXPECT_EQ(g.tokens[s * g.max_len], seqs[sentences].tokens[0]);
        }
        total += g.token_count();
    }
    EXPECT_EQ(sentences, seqs.size());
    std::size_t expected = 0;
    for (const auto& s : seqs) expected += s.tokens.size();
    EXPECT_EQ(total, expected);
    EXPECT_THROW(split_micro_batches(random_sequences(3, 2, 3, 6, 1), 4), InvalidConfig);
}

// ---------------------------------------------------------------------------
// Loss and optimizer

TEST(Loss, ZeroLogitsGiveLogV) {
    MatrixD z(3, 5);
    std::vector<int> t{1, kIgnoreTarget, 4};
    const auto lv = cross_entropy<double>(z, t, 0.0, nullptr);
    EXPECT_EQ(lv.count, 2u);
    EXPECT_NEAR(lv.loss, std::log(5.0), 1e-15);
    std::vector<int> none{kIgnoreTarget, kIgnoreTarget, kIgnoreTarget};
    EXPECT_THROW(cross_entropy<double>(z, none, 0.0, nullptr), EmptyBatch);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(5);
    const MatrixD z = powernorm::testing::random_matrix(4, 6, rng);
    std::vector<int> t{0, 5, kIgnoreTarget, 2};
    for (double s : {0.0, 0.1}) {
        MatrixD g;
        cross_entropy<double>(z, t, s, &g);
        const auto num = powernorm::testing::numeric_gradient(
            [&](const MatrixD& x) { return cross_entropy<double>(x, t, s, nullptr).loss; }, z);
        for (std::size_t k = 0; k < g.size(); ++k) {
            EXPECT_LT(relative_error(g.values()[k], num.values()[k]), 1e-6);
        }
        for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(g(2, j), 0.0);
    }
}

TEST(Adam, FirstStepMovesBySignedLearningRate) {
    auto cfg = small_config(NormKind::LN);
    cfg.n_layers = 0;
    Model<double> m(cfg);
    TrainConfig t = plain_train();
    Adam<double> opt(m, t);
    const auto before = flat_values(m);
    std::mt19937_64 rng(9);
    std::normal_distribution<double> normal;
    std::vector<double> g;
    for (auto& p : m.parameters())
        for (auto& x : p.grad) g.push_back(x = normal(rng));
    opt.step(0.01);
    const auto after = flat_values(m);
    for (std::size_t k = 0; k < g.size(); ++k) {
        // m_hat = g, v_hat = g^2 after one step
        const double expected = before[k] - 0.01 * g[k] / (std::abs(g[k]) + t.adam_eps);
        EXPECT_NEAR(after[k], expected, 1e-15);
    }
}

// ---------------------------------------------------------------------------
// Training step

TEST(TrainStep, ZeroLearningRateLeavesParametersUnchanged) {
    for (auto kind : {NormKind::BN, NormKind::LN, NormKind::PNV, NormKind::PN}) {
        Model<double> m(small_config(kind));
        const auto before = flat_values(m);
        auto t = plain_train(0.0);
        Adam<double> opt(m, t);
        const auto mbs = split_micro_batches(random_sequences(8, 3, 8, 6, 3), 1);
        const auto r = train_step(m, opt, mbs, t, 1);
        EXPECT_TRUE(std::isfinite(r.loss));
        EXPECT_EQ(flat_values(m), before) << to_string(kind);
    }
}

TEST(TrainStep, SingleMicroBatchEqualsPlainStep) {
    for (auto kind : {NormKind::BN, NormKind::PN}) {
        auto cfg = small_config(kind);
        Model<double> a(cfg), b(cfg);
        auto t = plain_train();
        Adam<double> oa(a, t), ob(b, t);
        const auto seqs = random_sequences(6, 3, 8, 6, 4);
        const auto r = train_step(a, oa, split_micro_batches(seqs, 1), t, 1);

        b.zero_grad();
        auto fp = b.forward(TokenBatch::from_sequences(seqs), Mode::Training);
        MatrixD dl;
        const auto lv = cross_entropy(fp.logits, fp.targets, t.label_smoothing, &dl);
        b.backward(dl, 1.0);
        ob.step(learning_rate(t, 1));

        EXPECT_EQ(r.loss, lv.loss);
        EXPECT_EQ(flat_values(a), flat_values(b)) << to_string(kind);
        EXPECT_EQ(a.norm_state_snapshot().entries(), b.norm_state_snapshot().entries());
    }
}

TEST(TrainStep, LayerNormAccumulationAveragesFullGradients) {
    auto cfg = small_config(NormKind::LN);
    cfg.layer_scale_enabled = true;
    // Two halves with the same number of targeted tokens.
    auto first = random_sequences(4, 6, 6, 6, 10);
    auto second = random_sequences(4, 6, 6, 6, 11);
    std::vector<Sequence> all = first;
    all.insert(all.end(), second.begin(), second.end());
    const std::vector<TokenBatch> mbs{TokenBatch::from_sequences(first), TokenBatch::from_sequences(second)};
    ASSERT_EQ(mbs[0].target_count(), mbs[1].target_count());

    Model<double> acc(cfg);
    auto t = plain_train(0.0);
    t.total_tokens_per_step = 128;
    Adam<double> opt(acc, t);
    train_step(acc, opt, mbs, t, 1);
    const auto g_acc = flat_grads(acc);

    std::vector<std::vector<double>> full;
    for (const auto& mb : mbs) {
        Model<double> m(cfg);
        m.zero_grad();
        auto fp = m.forward(mb, Mode::Training);
        MatrixD dl;
        cross_entropy(fp.logits, fp.targets, t.label_smoothing, &dl);
        m.backward(dl, 1.0);
        full.push_back(flat_grads(m));
    }
    std::vector<double> avg(g_acc.size());
    for (std::size_t k = 0; k < avg.size(); ++k) avg[k] = 0.5 * (full[0][k] + full[1][k]);
    EXPECT_LT(max_diff(g_acc, avg), 1e-10);
}

TEST(TrainStep, RunningStateUpdatesOncePerMicroBatch) {
    auto cfg = small_config(NormKind::PN);
    Model<double> m(cfg);
    auto t = plain_train();
    t.total_tokens_per_step = 192;
    Adam<double> opt(m, t);
    const auto mbs = split_micro_batches(random_sequences(12, 3, 8, 6, 5), 3);
    train_step(m, opt, mbs, t, 1);
    for (const auto* site : std::as_const(m).norm_sites()) EXPECT_EQ(site->pn.step, 3u) << site->name;
}

TEST(TrainStep, PaddingChangesNothing) {
    for (auto kind : {NormKind::BN, NormKind::PNV, NormKind::PN}) {
        auto cfg = small_config(kind);
        Model<double> a(cfg), b(cfg);
        const auto seqs = random_sequences(5, 2, 7, 6, 6);
        const auto tight = TokenBatch::from_sequences(seqs);
        const auto loose = TokenBatch::from_sequences(seqs, 16);
        ASSERT_GT(loose.max_len, tight.max_len);
        auto t = plain_train();
        Adam<double> oa(a, t), ob(b, t);
        const auto ra = train_step(a, oa, {tight}, t, 1, true);
        const auto rb = train_step(b, ob, {loose}, t, 1, true);
        EXPECT_EQ(ra.loss, rb.loss);
        EXPECT_EQ(flat_grads(a), flat_grads(b));
        EXPECT_EQ(flat_values(a), flat_values(b));
        ASSERT_EQ(ra.metrics.size(), rb.metrics.size());
        for (std::size_t k = 0; k < ra.metrics.size(); ++k) {
            EXPECT_EQ(metrics_csv_row(ra.metrics[k]), metrics_csv_row(rb.metrics[k]));
        }
    }
}

TEST(TrainStep, CollectsOneRecordPerNormSite) {
    auto cfg = small_config(NormKind::BN);
    cfg.n_layers = 2;
    Model<double> m(cfg);
    auto t = plain_train();
    Adam<double> opt(m, t);
    const auto r = train_step(m, opt, split_micro_batches(random_sequences(6, 3, 8, 6, 7), 1), t, 4, true);
    ASSERT_EQ(r.metrics.size(), 5u);
    EXPECT_EQ(r.metrics[0].layer_id, "layer0.norm1");
    EXPECT_EQ(r.metrics[4].layer_id, "final_norm");
    EXPECT_EQ(r.metrics[0].step, 4u);
    EXPECT_TRUE(r.metrics[0].dist_sigma2.has_value());
    EXPECT_TRUE(r.metrics[0].norm_g_sigma2.has_value());
}

TEST(TrainStep, TwoRunsGiveIdenticalLossCurves) {
    for (double dropout : {0.0, 0.2}) {
        std::vector<double> curves[2];
        for (auto& curve : curves) {
            auto cfg = small_config(NormKind::PN);
            cfg.pn_warmup_steps = 3;
            Model<double> m(cfg);
            auto t = plain_train();
            t.dropout = dropout;
            Adam<double> opt(m, t);
            std::mt19937_64 rng(12);
            CopyTask task({4, 2, 4});
            for (std::uint64_t s = 1; s <= 8; ++s) {
                auto mbs = split_micro_batches(task.sample_tokens(64, rng), 1);
                curve.push_back(train_step(m, opt, mbs, t, s).loss);
            }
        }
        EXPECT_EQ(curves[0], curves[1]);
    }
}

TEST(TrainStep, FrozenPsiStillTrains) {
    auto cfg = small_config(NormKind::PN);
    cfg.pn_alpha_fwd = 1.0;
    Model<double> m(cfg);
    auto t = plain_train(1e-2);
    Adam<double> opt(m, t);
    std::mt19937_64 rng(13);
    CopyTask task({4, 2, 4});
    for (std::uint64_t s = 1; s <= 20; ++s) {
        const auto r = train_step(m, opt, split_micro_batches(task.sample_tokens(64, rng), 1), t, s);
        ASSERT_TRUE(std::isfinite(r.loss));
        for (double g : flat_grads(m)) ASSERT_TRUE(std::isfinite(g));
    }
    for (const auto* site : std::as_const(m).norm_sites())
        for (double v : site->pn.psi2) EXPECT_EQ(v, 1.0);
}

// ---------------------------------------------------------------------------
// Whole-model gradient check

TEST(Gradient, WholeModelMatchesFiniteDifferences) {
    for (auto kind : {NormKind::LN, NormKind::BN, NormKind::PNV}) {
        auto cfg = small_config(kind, 21);
        cfg.layer_scale_enabled = true;
        const auto batch = TokenBatch::from_sequences(random_sequences(3, 3, 5, cfg.vocab_size, 22));
        Model<double> m(cfg);

        auto loss = [&]() {
            auto fp = m.forward(batch, Mode::Training);
            return cross_entropy<double>(fp.logits, fp.targets, 0.1, nullptr).loss;
        };
        m.zero_grad();
        {
            auto fp = m.forward(batch, Mode::Training);
            MatrixD dl;
            cross_entropy(fp.logits, fp.targets, 0.1, &dl);
            m.backward(dl, 1.0);
        }
        double worst = 0;
        std::mt19937_64 pick(23);
        for (auto& p : m.parameters()) {
            // A handful of entries per tensor; embeddings of unused rows have
            // zero gradient on both sides.
            std::uniform_int_distribution<std::size_t> idx(0, p.value.size() - 1);
            for (int k = 0; k < 4; ++k) {
                const std::size_t i = idx(pick);
                const double orig = p.value[i];
                p.value[i] = orig + 1e-5;
                const double fp = loss();
                p.value[i] = orig - 1e-5;
                const double fm = loss();
                p.value[i] = orig;
                worst = std::max(worst, relative_error(p.grad[i], (fp - fm) / 2e-5));
            }
        }
        EXPECT_LT(worst, 1e-5) << to_string(kind);
    }
}

// ---------------------------------------------------------------------------
// Evaluation

TEST(Evaluate, UniformModelHasPerplexityV) {
    for (auto kind : {NormKind::BN, NormKind::LN}) {
        auto cfg = small_config(kind);
        Model<double> m(cfg);
        for (auto& p : m.parameters()) {
            if (p.name == "out.w" || p.name == "out.b") std::fill(p.value.begin(), p.value.end(), 0.0);
        }
        const auto r = evaluate(m, random_sequences(10, 2, 6, cfg.vocab_size, 8), 4);
        EXPECT_NEAR(r.perplexity, static_cast<double>(cfg.vocab_size), 1e-12);
    }
}

TEST(Evaluate, ConfidentMemorizerApproachesOne) {
    auto cfg = small_config(NormKind::LN);
    cfg.n_layers = 0;
    Model<double> m(cfg);
    for (auto& p : m.parameters()) {
        if (p.name == "out.w") std::fill(p.value.begin(), p.value.end(), 0.0);
        if (p.name == "out.b") p.value[3] = 60.0;
    }
    const std::vector<Sequence> corpus{{{1}, {3}}};
    EXPECT_NEAR(evaluate(m, corpus).perplexity, 1.0, 1e-12);
}

TEST(Evaluate, DeterministicAndLeavesStateAlone) {
    auto cfg = small_config(NormKind::PN);
    Model<double> m(cfg);
    auto t = plain_train();
    Adam<double> opt(m, t);
    train_step(m, opt, split_micro_batches(random_sequences(6, 3, 8, 6, 14), 1), t, 1);
    const auto before = m.norm_state_snapshot();
    const auto corpus = random_sequences(9, 2, 7, cfg.vocab_size, 15);
    const auto a = evaluate(m, corpus, 4);
    const auto b = evaluate(m, corpus, 4);
    EXPECT_EQ(a.mean_loss, b.mean_loss);
    EXPECT_EQ(a.tokens, b.tokens);
    EXPECT_EQ(m.norm_state_snapshot().entries(), before.entries());
}

TEST(Evaluate, EmptyCorpusThrows) {
    Model<double> m(small_config(NormKind::LN));
    EXPECT_THROW(evaluate(m, {}), EmptyCorpus);
    const std::vector<Sequence> blind{{{1, 2}, {kIgnoreTarget, kIgnoreTarget}}};
    EXPECT_THROW(evaluate(m, blind), EmptyCorpus);
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, RoundTripRestoresParametersAndState) {
    for (auto kind : {NormKind::BN, NormKind::LN, NormKind::PNV, NormKind::PN}) {
        auto cfg = small_config(kind);
        cfg.layer_scale_enabled = kind == NormKind::PN;
        Model<double> m(cfg);
        auto t = plain_train();
        Adam<double> opt(m, t);
        for (std::uint64_t s = 1; s <= 3; ++s) {
            train_step(m, opt, split_micro_batches(random_sequences(6, 3, 8, 6, 30 + s), 1), t, s);
        }
        const auto dir = std::filesystem::temp_directory_path() / ("pn_ckpt_" + std::string(to_string(kind)));
        std::filesystem::remove_all(dir);
        save_checkpoint(m, dir, 3);
        Model<double> r = load_checkpoint<double>(dir);
        EXPECT_EQ(flat_values(r), flat_values(m));
        EXPECT_EQ(r.norm_state_snapshot().entries(), m.norm_state_snapshot().entries());
        const auto corpus = random_sequences(5, 2, 7, cfg.vocab_size, 40);
        EXPECT_EQ(evaluate(r, corpus).mean_loss, evaluate(m, corpus).mean_loss);
        std::filesystem::remove_all(dir);
    }
}

TEST(Checkpoint, ConfigJsonRoundTrip) {
    auto cfg = small_config(NormKind::PN);
    cfg.pn_alpha_bwd = 0.95;
    cfg.pn_warmup_steps = 17;
    cfg.causal = false;
    cfg.embedding_init = EmbeddingInit::Identity;
    const auto back = model_config_from_json(model_config_json(cfg));
    EXPECT_EQ(model_config_json(back), model_config_json(cfg));
    EXPECT_THROW(model_config_from_json("{\"vocab_size\": 3}"), FormatError);
    EXPECT_THROW(model_config_from_json("not json"), FormatError);
}

TEST(Checkpoint, TruncatedParamsRejected) {
    Model<double> m(small_config(NormKind::LN));
    const auto dir = std::filesystem::temp_directory_path() / "pn_ckpt_truncated";
    std::filesystem::remove_all(dir);
    save_checkpoint(m, dir, 0);
    std::filesystem::resize_file(dir / "params.bin", 16);
    EXPECT_THROW(load_checkpoint<double>(dir), FormatError);
    std::filesystem::remove_all(dir);
}

// ---------------------------------------------------------------------------
// Tasks

TEST(CopyTaskData, LayoutAndTargets) {
    CopyTask task({5, 2, 4});
    EXPECT_EQ(task.vocab_size(), 7u);
    std::mt19937_64 rng(1);
    for (int k = 0; k < 50; ++k) {
        const auto s = task.sample(rng);
        const std::size_t L = (s.tokens.size() - 1) / 2;
        ASSERT_EQ(s.tokens.size(), 2 * L + 1);
        ASSERT_GE(L, 2u);
        ASSERT_LE(L, 4u);
        EXPECT_EQ(s.tokens[L], task.sep());
        for (std::size_t i = 0; i < L; ++i) {
            EXPECT_LT(s.tokens[i], 5);
            EXPECT_EQ(s.targets[i], kIgnoreTarget);
            EXPECT_EQ(s.tokens[L + 1 + i], task.blank());
            EXPECT_EQ(s.targets[L + 1 + i], s.tokens[i]);
        }
    }
    EXPECT_THROW(CopyTask({5, 3, 2}), InvalidConfig);
}

TEST(CopyTaskData, SeededAndTokenBudgeted) {
    CopyTask task({8, 2, 6});
    std::mt19937_64 a(5), b(5);
    const auto sa = task.sample_tokens(200, a);
    const auto sb = task.sample_tokens(200, b);
    ASSERT_EQ(sa.size(), sb.size());
    std::size_t n = 0;
    for (std::size_t i = 0; i < sa.size(); ++i) {
        EXPECT_EQ(sa[i].tokens, sb[i].tokens);
        n += sa[i].tokens.size();
    }
    EXPECT_GE(n, 200u);
    EXPECT_LT(n - sa.back().tokens.size(), 200u);
}

TEST(CharCorpusData, VocabularySplitsAndShiftedTargets) {
    const std::string text = "abracadabra, abracadabra!";
    const auto c = CharCorpus::from_text(text, 0.8);
    EXPECT_EQ(c.vocab_size(), 8u);  // ' ' ! , a b c d r
    EXPECT_EQ(c.train().size(), 20u);
    EXPECT_EQ(c.held_out().size(), 5u);
    EXPECT_EQ(c.train()[0], 3);  // 'a'
    std::mt19937_64 rng(2);
    for (const auto& s : c.sample_tokens(30, 3, 6, rng)) {
        for (std::size_t p = 0; p + 1 < s.tokens.size(); ++p) EXPECT_EQ(s.targets[p], s.tokens[p + 1]);
    }
    const auto ev = c.eval_set(2);
    ASSERT_EQ(ev.size(), 2u);
    EXPECT_EQ(ev[0].tokens.size(), 2u);
    EXPECT_EQ(ev[1].targets.back(), c.held_out().back());
    EXPECT_THROW(CharCorpus::from_text("ab"), EmptyCorpus);
    EXPECT_THROW(CharCorpus::from_file("/nonexistent/corpus.txt"), EmptyCorpus);
}

TEST(SynthStreamData, SeededExactTokenCounts) {
    for (auto kind : {StreamKind::Gaussian, StreamKind::ZipfianVarlen}) {
        SynthStreamConfig cfg;
        cfg.kind = kind;
        cfg.seed = 3;
        SynthStream a(cfg), b(cfg);
        for (int k = 0; k < 5; ++k) {
            const auto ba = a.next();
            const auto bb = b.next();
            EXPECT_EQ(ba.token_count(), cfg.tokens_per_batch);
            EXPECT_TRUE(std::ranges::equal(ba.values.values(), bb.values.values()));
            EXPECT_EQ(ba.mask, bb.mask);
        }
    }
    SynthStreamConfig bad;
    bad.sentence_len = 30;
    EXPECT_THROW(SynthStream{bad}, InvalidConfig);
    EXPECT_THROW(parse_stream_kind("uniform"), InvalidConfig);
}

TEST(SynthStreamData, ZipfianBatchesHaveVaryingLengths) {
    SynthStreamConfig cfg;
    cfg.kind = StreamKind::ZipfianVarlen;
    SynthStream s(cfg);
    const auto b = s.next();
    EXPECT_GT(b.num_sentences, 2u);
    EXPECT_LT(b.token_count(), b.num_sentences * b.max_len);
}

TEST(Precision, FloatModelTrains) {
    auto cfg = small_config(NormKind::PN);
    Model<float> m(cfg);
    auto t = plain_train(1e-2);
    Adam<float> opt(m, t);
    std::mt19937_64 rng(17);
    CopyTask task({4, 2, 4});
    double first = 0, last = 0;
    for (std::uint64_t s = 1; s <= 30; ++s) {
        const auto r = train_step(m, opt, split_micro_batches(task.sample_tokens(64, rng), 1), t, s);
        ASSERT_TRUE(std::isfinite(r.loss));
        (s == 1 ? first : last) = r.loss;
    }
    EXPECT_LT(last, first);
}

#include "powernorm/toymodel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

namespace powernorm {

// ---------------------------------------------------------------------------
// Configs

void ModelConfig::validate() const {
    if (vocab_size == 0) throw InvalidConfig("ModelConfig: vocab_size must be > 0");
    if (d_model == 0 || n_heads == 0) throw InvalidConfig("ModelConfig: d_model and n_heads must be > 0");
    if (d_model % n_heads != 0) {
        throw InvalidConfig("ModelConfig: d_model " + std::to_string(d_model) +
                            " is not divisible by n_heads " + std::to_string(n_heads));
    }
    if (n_layers > 0 && ffn_dim == 0) throw InvalidConfig("ModelConfig: ffn_dim must be > 0");
    if (max_len == 0) throw InvalidConfig("ModelConfig: max_len must be > 0");
    if (!(eps >= 0)) throw InvalidConfig("ModelConfig: eps must be >= 0");
    if (!(bn_alpha > 0 && bn_alpha < 1)) throw InvalidConfig("ModelConfig: bn_alpha must lie in (0,1)");
    if (!(pn_alpha_fwd > 0 && pn_alpha_fwd <= 1) || !(pn_alpha_bwd > 0 && pn_alpha_bwd <= 1)) {
        throw InvalidConfig("ModelConfig: PN alphas must lie in (0,1]");
    }
}

void TrainConfig::validate() const {
    if (total_tokens_per_step == 0 || micro_batch_tokens == 0) {
        throw InvalidConfig("TrainConfig: token counts must be > 0");
    }
    if (total_tokens_per_step % micro_batch_tokens != 0) {
        throw InvalidConfig("TrainConfig: micro_batch_tokens " + std::to_string(micro_batch_tokens) +
                            " does not divide total_tokens_per_step " +
                            std::to_string(total_tokens_per_step));
    }
    if (!(lr >= 0)) throw InvalidConfig("TrainConfig: lr must be >= 0");
    if (!(label_smoothing >= 0 && label_smoothing < 1)) {
        throw InvalidConfig("TrainConfig: label_smoothing must lie in [0,1)");
    }
    if (!(dropout >= 0 && dropout < 1)) throw InvalidConfig("TrainConfig: dropout must lie in [0,1)");
    if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1)) {
        throw InvalidConfig("TrainConfig: Adam betas must lie in [0,1)");
    }
}

double learning_rate(const TrainConfig& cfg, std::uint64_t step) {
    if (step == 0) step = 1;
    if (cfg.lr_warmup_steps == 0) return cfg.lr;
    const double s = static_cast<double>(step);
    const double w = static_cast<double>(cfg.lr_warmup_steps);
    return cfg.lr * std::min(s / w, std::sqrt(w / s));
}

// ---------------------------------------------------------------------------
// Batches

TokenBatch TokenBatch::from_sequences(const std::vector<Sequence>& seqs, std::size_t pad_to) {
    if (seqs.empty()) throw EmptyBatch("TokenBatch: no sentences");
    std::size_t longest = 0;
    for (const auto& s : seqs) {
        if (s.tokens.size() != s.targets.size()) {
            throw ShapeMismatch("TokenBatch: tokens and targets differ in length");
        }
        longest = std::max(longest, s.tokens.size());
    }
    if (longest == 0) throw EmptyBatch("TokenBatch: every sentence is empty");
    TokenBatch b;
    b.num_sentences = seqs.size();
    b.max_len = std::max(longest, pad_to);
    b.tokens.assign(b.num_sentences * b.max_len, 0);
    b.targets.assign(b.num_sentences * b.max_len, kIgnoreTarget);
    for (std::size_t s = 0; s < seqs.size(); ++s) {
        std::copy(seqs[s].tokens.begin(), seqs[s].tokens.end(), b.tokens.begin() + s * b.max_len);
        std::copy(seqs[s].targets.begin(), seqs[s].targets.end(), b.targets.begin() + s * b.max_len);
        b.lengths.push_back(seqs[s].tokens.size());
    }
    return b;
}

std::size_t TokenBatch::token_count() const {
    std::size_t n = 0;
    for (auto l : lengths) n += l;
    return n;
}

std::size_t TokenBatch::target_count() const {
    std::size_t n = 0;
    for (std::size_t s = 0; s < num_sentences; ++s)
        for (std::size_t p = 0; p < lengths[s]; ++p) n += targets[s * max_len + p] != kIgnoreTarget;
    return n;
}

std::vector<TokenBatch> split_micro_batches(const std::vector<Sequence>& seqs, std::size_t count) {
    if (count == 0 || seqs.size() < count) {
        throw InvalidConfig("split_micro_batches: " + std::to_string(seqs.size()) +
                            " sentences cannot fill " + std::to_string(count) + " micro-batches");
    }
    std::size_t total = 0;
    for (const auto& s : seqs) total += s.tokens.size();

    std::vector<TokenBatch> out;
    std::vector<Sequence> group;
    std::size_t seen = 0;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        group.push_back(seqs[i]);
        seen += seqs[i].tokens.size();
        const std::size_t remaining_groups = count - out.size() - 1;
        const std::size_t remaining_seqs = seqs.size() - i - 1;
        // Close the group once it reaches its share of the tokens, or when
        // the remaining sentences are just enough for the remaining groups.
        const bool share_reached = seen * count >= total * (out.size() + 1);
        if (remaining_groups > 0 && (share_reached || remaining_seqs == remaining_groups)) {
            out.push_back(TokenBatch::from_sequences(group));
            group.clear();
        }
    }
    out.push_back(TokenBatch::from_sequences(group));
    return out;
}

// ---------------------------------------------------------------------------
// Linear

namespace {

template <Real T>
void add_scaled(std::span<T> dst, std::span<const T> src, T w) {
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += w * src[k];
}

template <Real T>
void fill_zero(std::span<T> v) {
    std::fill(v.begin(), v.end(), T(0));
}

} // namespace

template <Real T>
Linear<T>::Linear(std::size_t in, std::size_t out, std::mt19937_64& rng)
    : w(in, out), b(out), dw(in, out), db(out) {
    // Glorot uniform
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> dist(-a, a);
    for (auto& v : w.values()) v = static_cast<T>(dist(rng));
}

template <Real T>
Matrix<T> Linear<T>::forward(const Matrix<T>& x, bool keep_input) {
    Matrix<T> y = matmul(x, w);
    for (std::size_t i = 0; i < y.rows(); ++i) {
        auto r = y.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) r[j] += b[j];
    }
    if (keep_input) input = x;
    return y;
}

template <Real T>
Matrix<T> Linear<T>::backward(const Matrix<T>& dy, T weight) {
    const Matrix<T> gw = matmul_tn(input, dy);
    add_scaled<T>(dw.values(), gw.values(), weight);
    const Vector<T> gb = col_sum(dy);
    add_scaled<T>(db.values(), gb.values(), weight);
    return matmul(dy, transpose(w));
}

// ---------------------------------------------------------------------------
// Normalization sites

template <Real T>
NormSite<T>::NormSite(std::string site_name, const ModelConfig& cfg)
    : name(std::move(site_name)),
      kind(cfg.norm_kind),
      layer_scale(cfg.layer_scale_enabled),
      eps(static_cast<T>(cfg.eps)),
      params(AffineParams<T>::identity(cfg.d_model)),
      dgamma(cfg.d_model),
      dbeta(cfg.d_model) {
    const std::size_t d = cfg.d_model;
    if (layer_scale) {
        scale = Vector<T>(d, T(1));
        dscale = Vector<T>(d);
    }
    switch (kind) {
    case NormKind::BN: bn = BNRunningState<T>::init(d, T(cfg.bn_alpha), eps); break;
    case NormKind::PNV: pnv = PNVRunningState<T>::init(d, T(cfg.bn_alpha), eps); break;
    case NormKind::PN:
        pn = PNState<T>::init(d, T(cfg.pn_alpha_fwd), T(cfg.pn_alpha_bwd), cfg.pn_warmup_steps, eps);
        break;
    case NormKind::LN: break;
    }
}

template <Real T>
Matrix<T> NormSite<T>::forward(const Matrix<T>& x, Mode mode, bool instrument) {
    Matrix<T> scaled;
    const Matrix<T>* in = &x;
    if (layer_scale) {
        scale_input = x;
        scaled = layer_scale_forward(x, scale);
        in = &scaled;
    }
    ForwardResult<T> r;
    switch (kind) {
    case NormKind::BN: r = bn_forward(*in, params, bn, mode, instrument); break;
    case NormKind::LN: r = ln_forward(*in, params, eps); break;
    case NormKind::PNV: r = pnv_forward(*in, params, pnv, mode, instrument); break;
    case NormKind::PN: r = pn_forward(*in, params, pn, mode, instrument); break;
    }
    cache = std::move(r.cache);
    return std::move(r.y);
}

template <Real T>
Matrix<T> NormSite<T>::backward(const Matrix<T>& dy, T weight) {
    BackwardResult<T> g;
    switch (kind) {
    case NormKind::BN: g = bn_backward(dy, cache); break;
    case NormKind::LN: g = ln_backward(dy, cache); break;
    case NormKind::PNV: g = pnv_backward(dy, cache); break;
    case NormKind::PN: g = pn_backward(dy, cache, pn); break;
    }
    add_scaled<T>(dgamma.values(), g.dgamma.values(), weight);
    add_scaled<T>(dbeta.values(), g.dbeta.values(), weight);
    if (!layer_scale) return std::move(g.dx);
    auto ls = layer_scale_backward(g.dx, scale_input, scale);
    add_scaled<T>(dscale.values(), ls.dscale.values(), weight);
    return std::move(ls.dx);
}

template <Real T>
std::size_t NormSite<T>::state_size() const {
    switch (kind) {
    case NormKind::BN: return bn.mu.size() + bn.sigma2.size();
    case NormKind::PNV: return pnv.psi2.size();
    case NormKind::PN: return pn.psi2.size() + pn.nu.size();
    case NormKind::LN: return 0;
    }
    return 0;
}

template <Real T>
StateSnapshot NormSite<T>::snapshot() const {
    switch (kind) {
    case NormKind::BN: return to_snapshot(bn);
    case NormKind::PNV: return to_snapshot(pnv);
    case NormKind::PN: return to_snapshot(pn);
    case NormKind::LN: break;
    }
    StateSnapshot s;
    s.set("kind", static_cast<std::uint64_t>(NormKind::LN));
    return s;
}

template <Real T>
void NormSite<T>::restore(const StateSnapshot& snap) {
    switch (kind) {
    case NormKind::BN: bn = bn_state_from_snapshot<T>(snap); break;
    case NormKind::PNV: pnv = pnv_state_from_snapshot<T>(snap); break;
    case NormKind::PN: pn = pn_state_from_snapshot<T>(snap); break;
    case NormKind::LN: break;
    }
}

// ---------------------------------------------------------------------------
// Model

template <Real T>
Model<T>::Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t d = cfg_.d_model;
    const std::size_t V = cfg_.vocab_size;
    std::mt19937_64 rng(cfg_.seed);
    dropout_rng_.seed(cfg_.seed ^ 0x9E3779B97F4A7C15ull);

    tok_emb_ = Matrix<T>(V, d);
    dtok_emb_ = Matrix<T>(V, d);
    pos_emb_ = Matrix<T>(cfg_.max_len, d);
    dpos_emb_ = Matrix<T>(cfg_.max_len, d);
    std::normal_distribution<double> normal(0.0, 1.0);
    if (cfg_.embedding_init == EmbeddingInit::Identity) {
        for (std::size_t i = 0; i < std::min(V, d); ++i) tok_emb_(i, i) = T(1);
    } else {
        for (auto& v : tok_emb_.values()) v = static_cast<T>(normal(rng));
    }
    for (auto& v : pos_emb_.values()) v = static_cast<T>(normal(rng));

    layers_.reserve(cfg_.n_layers);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
        EncoderLayer<T> layer;
        const std::string prefix = "layer" + std::to_string(l) + ".";
        layer.norm1 = NormSite<T>(prefix + "norm1", cfg_);
        layer.wq = Linear<T>(d, d, rng);
        layer.wk = Linear<T>(d, d, rng);
        layer.wv = Linear<T>(d, d, rng);
        layer.wo = Linear<T>(d, d, rng);
        layer.norm2 = NormSite<T>(prefix + "norm2", cfg_);
        layer.ff1 = Linear<T>(d, cfg_.ffn_dim, rng);
        layer.ff2 = Linear<T>(cfg_.ffn_dim, d, rng);
        layers_.push_back(std::move(layer));
    }
    if (cfg_.n_layers > 0) final_norm_ = NormSite<T>("final_norm", cfg_);
    out_ = Linear<T>(d, V, rng);
}

template <Real T>
Matrix<T> Model<T>::dropout_mask(std::size_t rows, std::size_t cols) {
    Matrix<T> m(rows, cols);
    std::bernoulli_distribution keep(1.0 - dropout_);
    const T s = static_cast<T>(1.0 / (1.0 - dropout_));
    for (auto& v : m.values()) v = keep(dropout_rng_) ? s : T(0);
    return m;
}

template <Real T>
Matrix<T> Model<T>::attention_forward(EncoderLayer<T>& layer, const Matrix<T>& x) {
    auto& c = layer.attn;
    c.q = layer.wq.forward(x);
    c.k = layer.wk.forward(x);
    c.v = layer.wv.forward(x);
    const std::size_t d = cfg_.d_model;
    const std::size_t H = cfg_.n_heads;
    const std::size_t dh = d / H;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    c.ctx = Matrix<T>(x.rows(), d);
    c.probs.assign(offsets_.size() * H, {});

    for (std::size_t s = 0; s < offsets_.size(); ++s) {
        const std::size_t o = offsets_[s];
        const std::size_t L = lengths_[s];
        for (std::size_t h = 0; h < H; ++h) {
            auto& P = c.probs[s * H + h];
            P.assign(L * L, T(0));
            const std::size_t c0 = h * dh;
            for (std::size_t i = 0; i < L; ++i) {
                const std::size_t jmax = cfg_.causal ? i + 1 : L;
                const T* qi = &c.q(o + i, c0);
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t j = 0; j < jmax; ++j) {
                    const T* kj = &c.k(o + j, c0);
                    T acc = T(0);
                    for (std::size_t t = 0; t < dh; ++t) acc += qi[t] * kj[t];
                    P[i * L + j] = acc * inv_sqrt;
                    mx = std::max(mx, P[i * L + j]);
                }
                T z = T(0);
                for (std::size_t j = 0; j < jmax; ++j) {
                    P[i * L + j] = std::exp(P[i * L + j] - mx);
                    z += P[i * L + j];
                }
                T* ci = &c.ctx(o + i, c0);
                for (std::size_t j = 0; j < jmax; ++j) {
                    P[i * L + j] /= z;
                    const T p = P[i * L + j];
                    const T* vj = &c.v(o + j, c0);
                    for (std::size_t t = 0; t < dh; ++t) ci[t] += p * vj[t];
                }
            }
        }
    }
    return layer.wo.forward(c.ctx);
}

template <Real T>
Matrix<T> Model<T>::attention_backward(EncoderLayer<T>& layer, const Matrix<T>& dout, T weight) {
    auto& c = layer.attn;
    const Matrix<T> dctx = layer.wo.backward(dout, weight);
    const std::size_t d = cfg_.d_model;
    const std::size_t H = cfg_.n_heads;
    const std::size_t dh = d / H;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    Matrix<T> dq(dctx.rows(), d), dk(dctx.rows(), d), dv(dctx.rows(), d);
    std::vector<T> dS;

    for (std::size_t s = 0; s < offsets_.size(); ++s) {
        const std::size_t o = offsets_[s];
        const std::size_t L = lengths_[s];
        dS.assign(L * L, T(0));
        for (std::size_t h = 0; h < H; ++h) {
            const auto& P = c.probs[s * H + h];
            const std::size_t c0 = h * dh;
            for (std::size_t i = 0; i < L; ++i) {
                const std::size_t jmax = cfg_.causal ? i + 1 : L;
                const T* gi = &dctx(o + i, c0);
                // dP_ij = <dctx_i, v_j>;  dS_ij = P_ij (dP_ij - sum_k P_ik dP_ik)
                T row_dot = T(0);
                for (std::size_t j = 0; j < jmax; ++j) {
                    const T* vj = &c.v(o + j, c0);
                    T acc = T(0);
                    for (std::size_t t = 0; t < dh; ++t) acc += gi[t] * vj[t];
                    dS[i * L + j] = acc;
                    row_dot += P[i * L + j] * acc;
                    T* dvj = &dv(o + j, c0);
                    const T p = P[i * L + j];
                    for (std::size_t t = 0; t < dh; ++t) dvj[t] += p * gi[t];
                }
                for (std::size_t j = 0; j < jmax; ++j) {
                    dS[i * L + j] = P[i * L + j] * (dS[i * L + j] - row_dot) * inv_sqrt;
                }
                T* dqi = &dq(o + i, c0);
                const T* qi = &c.q(o + i, c0);
                for (std::size_t j = 0; j < jmax; ++j) {
                    const T g = dS[i * L + j];
                    const T* kj = &c.k(o + j, c0);
                    T* dkj = &dk(o + j, c0);
                    for (std::size_t t = 0; t < dh; ++t) {
                        dqi[t] += g * kj[t];
                        dkj[t] += g * qi[t];
                    }
                }
            }
        }
    }
    Matrix<T> dx = layer.wq.backward(dq, weight);
    add_inplace(dx, layer.wk.backward(dk, weight));
    add_inplace(dx, layer.wv.backward(dv, weight));
    return dx;
}

template <Real T>
ForwardPass<T> Model<T>::forward(const TokenBatch& batch, Mode mode, bool instrument, double dropout) {
    if (batch.lengths.size() != batch.num_sentences ||
        batch.tokens.size() != batch.num_sentences * batch.max_len ||
        batch.targets.size() != batch.tokens.size()) {
        throw ShapeMismatch("Model::forward: inconsistent TokenBatch");
    }
    dropout_ = mode == Mode::Training ? dropout : 0.0;
    offsets_.clear();
    lengths_.clear();
    flat_tokens_.clear();
    flat_pos_.clear();
    ForwardPass<T> out;
    for (std::size_t s = 0; s < batch.num_sentences; ++s) {
        const std::size_t L = batch.lengths[s];
        if (L == 0) continue;
        if (L > cfg_.max_len) {
            throw ShapeMismatch("Model::forward: sentence of length " + std::to_string(L) +
                                " exceeds max_len " + std::to_string(cfg_.max_len));
        }
        offsets_.push_back(flat_tokens_.size());
        lengths_.push_back(L);
        for (std::size_t p = 0; p < L; ++p) {
            const int tok = batch.tokens[s * batch.max_len + p];
            if (tok < 0 || static_cast<std::size_t>(tok) >= cfg_.vocab_size) {
                throw ShapeMismatch("Model::forward: token " + std::to_string(tok) + " out of vocabulary");
            }
            flat_tokens_.push_back(tok);
            flat_pos_.push_back(p);
            out.targets.push_back(batch.targets[s * batch.max_len + p]);
        }
    }
    if (flat_tokens_.empty()) throw EmptyBatch("Model::forward: batch has no tokens");

    const std::size_t N = flat_tokens_.size();
    const std::size_t d = cfg_.d_model;
    Matrix<T> h(N, d);
    for (std::size_t r = 0; r < N; ++r) {
        auto hr = h.row(r);
        auto te = tok_emb_.row(static_cast<std::size_t>(flat_tokens_[r]));
        auto pe = pos_emb_.row(flat_pos_[r]);
        for (std::size_t j = 0; j < d; ++j) hr[j] = te[j] + pe[j];
    }

    for (auto& layer : layers_) {
        Matrix<T> a = attention_forward(layer, layer.norm1.forward(h, mode, instrument));
        if (dropout_ > 0) {
            layer.drop1 = dropout_mask(N, d);
            a = hadamard(a, layer.drop1);
        } else {
            layer.drop1 = Matrix<T>();
        }
        add_inplace(h, a);

        Matrix<T> u = layer.ff1.forward(layer.norm2.forward(h, mode, instrument));
        layer.relu_mask = Matrix<T>(u.rows(), u.cols());
        for (std::size_t k = 0; k < u.size(); ++k) {
            const bool on = u.values()[k] > T(0);
            layer.relu_mask.values()[k] = on ? T(1) : T(0);
            if (!on) u.values()[k] = T(0);
        }
        Matrix<T> f = layer.ff2.forward(u);
        if (dropout_ > 0) {
            layer.drop2 = dropout_mask(N, d);
            f = hadamard(f, layer.drop2);
        } else {
            layer.drop2 = Matrix<T>();
        }
        add_inplace(h, f);
    }
    if (!layers_.empty()) h = final_norm_.forward(h, mode, instrument);
    out.logits = out_.forward(h);
    return out;
}

template <Real T>
void Model<T>::backward(const Matrix<T>& dlogits, T weight) {
    Matrix<T> dh = out_.backward(dlogits, weight);
    if (!layers_.empty()) dh = final_norm_.backward(dh, weight);
    for (std::size_t l = layers_.size(); l-- > 0;) {
        auto& layer = layers_[l];
        // FFN branch
        Matrix<T> df = layer.drop2.empty() ? dh : hadamard(dh, layer.drop2);
        Matrix<T> du = layer.ff2.backward(df, weight);
        du = hadamard(du, layer.relu_mask);
        add_inplace(dh, layer.norm2.backward(layer.ff1.backward(du, weight), weight));
        // Attention branch
        Matrix<T> da = layer.drop1.empty() ? dh : hadamard(dh, layer.drop1);
        add_inplace(dh, layer.norm1.backward(attention_backward(layer, da, weight), weight));
    }
    for (std::size_t r = 0; r < dh.rows(); ++r) {
        auto g = dh.row(r);
        auto te = dtok_emb_.row(static_cast<std::size_t>(flat_tokens_[r]));
        auto pe = dpos_emb_.row(flat_pos_[r]);
        for (std::size_t j = 0; j < g.size(); ++j) {
            te[j] += weight * g[j];
            pe[j] += weight * g[j];
        }
    }
}

template <Real T>
std::vector<ParamRef<T>> Model<T>::parameters() {
    std::vector<ParamRef<T>> ps;
    auto mat = [&](std::string name, Matrix<T>& v, Matrix<T>& g) {
        ps.push_back({std::move(name), v.values(), g.values(), v.rows(), v.cols()});
    };
    auto vec = [&](std::string name, Vector<T>& v, Vector<T>& g) {
        ps.push_back({std::move(name), v.values(), g.values(), 1, v.size()});
    };
    auto norm = [&](NormSite<T>& n) {
        if (n.layer_scale) vec(n.name + ".scale", n.scale, n.dscale);
        vec(n.name + ".gamma", n.params.gamma, n.dgamma);
        vec(n.name + ".beta", n.params.beta, n.dbeta);
    };
    auto lin = [&](const std::string& name, Linear<T>& l) {
        mat(name + ".w", l.w, l.dw);
        vec(name + ".b", l.b, l.db);
    };
    mat("tok_emb", tok_emb_, dtok_emb_);
    mat("pos_emb", pos_emb_, dpos_emb_);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        auto& L = layers_[l];
        const std::string p = "layer" + std::to_string(l) + ".";
        norm(L.norm1);
        lin(p + "wq", L.wq);
        lin(p + "wk", L.wk);
        lin(p + "wv", L.wv);
        lin(p + "wo", L.wo);
        norm(L.norm2);
        lin(p + "ff1", L.ff1);
        lin(p + "ff2", L.ff2);
    }
    if (!layers_.empty()) norm(final_norm_);
    lin("out", out_);
    return ps;
}

template <Real T>
void Model<T>::zero_grad() {
    for (auto& p : parameters()) fill_zero(p.grad);
}

template <Real T>
std::size_t Model<T>::parameter_count() const {
    std::size_t n = 0;
    for (auto& p : const_cast<Model*>(this)->parameters()) n += p.value.size();
    return n;
}

template <Real T>
std::vector<NormSite<T>*> Model<T>::norm_sites() {
    std::vector<NormSite<T>*> out;
    for (auto& l : layers_) {
        out.push_back(&l.norm1);
        out.push_back(&l.norm2);
    }
    if (!layers_.empty()) out.push_back(&final_norm_);
    return out;
}

template <Real T>
std::vector<const NormSite<T>*> Model<T>::norm_sites() const {
    std::vector<const NormSite<T>*> out;
    for (auto* s : const_cast<Model*>(this)->norm_sites()) out.push_back(s);
    return out;
}

template <Real T>
std::size_t Model<T>::norm_state_size() const {
    std::size_t n = 0;
    for (const auto* s : norm_sites()) n += s->state_size();
    return n;
}

template <Real T>
StateSnapshot Model<T>::norm_state_snapshot() const {
    StateSnapshot snap;
    snap.set("norm_kind", static_cast<std::uint64_t>(cfg_.norm_kind));
    for (const auto* s : norm_sites()) snap.merge(s->snapshot(), s->name + ".");
    return snap;
}

template <Real T>
void Model<T>::load_norm_state(const StateSnapshot& snap) {
    if (snap.get_u64("norm_kind") != static_cast<std::uint64_t>(cfg_.norm_kind)) {
        throw FormatError("load_norm_state: snapshot is for a different normalization");
    }
    for (auto* s : norm_sites()) s->restore(snap.extract(s->name + "."));
}

// ---------------------------------------------------------------------------
// Loss

template <Real T>
LossValue cross_entropy(const Matrix<T>& logits, std::span<const int> targets, double smoothing,
                        Matrix<T>* grad) {
    if (targets.size() != logits.rows()) throw ShapeMismatch("cross_entropy: targets vs logits rows");
    const std::size_t V = logits.cols();
    LossValue out;
    for (int t : targets) out.count += t != kIgnoreTarget;
    if (out.count == 0) throw EmptyBatch("cross_entropy: no targeted tokens");
    if (grad) *grad = Matrix<T>(logits.rows(), V);

    const double off = smoothing / static_cast<double>(V);
    const double on = 1.0 - smoothing + off;
    const double inv_n = 1.0 / static_cast<double>(out.count);
    double total = 0;
    std::vector<double> p(V);
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        const int t = targets[r];
        if (t == kIgnoreTarget) continue;
        if (t < 0 || static_cast<std::size_t>(t) >= V) throw ShapeMismatch("cross_entropy: target out of range");
        auto z = logits.row(r);
        double mx = -std::numeric_limits<double>::infinity();
        for (T v : z) mx = std::max(mx, static_cast<double>(v));
        double sum = 0;
        for (std::size_t j = 0; j < V; ++j) {
            p[j] = std::exp(static_cast<double>(z[j]) - mx);
            sum += p[j];
        }
        const double log_z = mx + std::log(sum);
        double loss = 0;
        for (std::size_t j = 0; j < V; ++j) {
            const double q = j == static_cast<std::size_t>(t) ? on : off;
            if (q > 0) loss -= q * (static_cast<double>(z[j]) - log_z);
            p[j] /= sum;
        }
        total += loss;
        if (grad) {
            auto g = grad->row(r);
            for (std::size_t j = 0; j < V; ++j) {
                const double q = j == static_cast<std::size_t>(t) ? on : off;
                g[j] = static_cast<T>((p[j] - q) * inv_n);
            }
        }
    }
    out.loss = total * inv_n;
    return out;
}

// ---------------------------------------------------------------------------
// Adam

template <Real T>
Adam<T>::Adam(Model<T>& model, const TrainConfig& cfg)
    : model_(model), beta1_(cfg.adam_beta1), beta2_(cfg.adam_beta2), eps_(cfg.adam_eps) {
    for (const auto& p : model_.parameters()) {
        m_.emplace_back(p.value.size(), T(0));
        v_.emplace_back(p.value.size(), T(0));
    }
}

template <Real T>
void Adam<T>::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const T b1 = static_cast<T>(beta1_);
    const T b2 = static_cast<T>(beta2_);
    const T step_size = static_cast<T>(lr / bc1);
    const T inv_bc2 = static_cast<T>(1.0 / bc2);
    const T eps = static_cast<T>(eps_);
    auto params = model_.parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& m = m_[k];
        auto& v = v_[k];
        auto val = params[k].value;
        auto g = params[k].grad;
        for (std::size_t i = 0; i < val.size(); ++i) {
            m[i] = b1 * m[i] + (T(1) - b1) * g[i];
            v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
            val[i] -= step_size * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Training and evaluation

template <Real T>
StepResult train_step(Model<T>& model, Adam<T>& opt, const std::vector<TokenBatch>& micro_batches,
                      const TrainConfig& cfg, std::uint64_t step, bool collect) {
    if (micro_batches.empty()) throw EmptyBatch("train_step: no micro-batches");
    std::size_t total_targets = 0;
    for (const auto& b : micro_batches) total_targets += b.target_count();
    if (total_targets == 0) throw EmptyBatch("train_step: no targeted tokens");

    StepResult res;
    model.zero_grad();
    for (std::size_t k = 0; k < micro_batches.size(); ++k) {
        const auto& mb = micro_batches[k];
        const std::size_t n = mb.target_count();
        if (n == 0) continue;
        const bool last = k + 1 == micro_batches.size();
        const bool instrument = collect && last;
        auto fp = model.forward(mb, Mode::Training, instrument, cfg.dropout);
        Matrix<T> dlogits;
        const auto lv = cross_entropy(fp.logits, fp.targets, cfg.label_smoothing, &dlogits);
        const double share = static_cast<double>(n) / static_cast<double>(total_targets);
        model.backward(dlogits, static_cast<T>(share));
        res.loss += share * lv.loss;
        res.tokens += mb.token_count();
        ++res.micro_steps;
        if (instrument) {
            for (const auto* site : std::as_const(model).norm_sites()) {
                const PNState<T>* pn = site->kind == NormKind::PN ? &site->pn : nullptr;
                res.metrics.push_back(collect_metrics(step, site->name, site->cache, site->params, pn));
            }
        }
    }
    res.lr = learning_rate(cfg, step);
    opt.step(res.lr);
    return res;
}

template <Real T>
EvalResult evaluate(Model<T>& model, const std::vector<Sequence>& corpus, std::size_t batch_sentences) {
    if (batch_sentences == 0) batch_sentences = 1;
    double total = 0;
    EvalResult res;
    for (std::size_t start = 0; start < corpus.size(); start += batch_sentences) {
        const std::size_t end = std::min(corpus.size(), start + batch_sentences);
        std::vector<Sequence> chunk(corpus.begin() + static_cast<std::ptrdiff_t>(start),
                                    corpus.begin() + static_cast<std::ptrdiff_t>(end));
        const TokenBatch b = TokenBatch::from_sequences(chunk);
        if (b.target_count() == 0) continue;
        auto fp = model.forward(b, Mode::Inference);
        const auto lv = cross_entropy<T>(fp.logits, fp.targets, 0.0, nullptr);
        total += lv.loss * static_cast<double>(lv.count);
        res.tokens += lv.count;
    }
    if (res.tokens == 0) throw EmptyCorpus("evaluate: corpus has no targeted tokens");
    res.mean_loss = total / static_cast<double>(res.tokens);
    res.perplexity = std::exp(res.mean_loss);
    return res;
}

#define POWERNORM_INSTANTIATE(T)                                                                  \
    template struct Linear<T>;                                                                    \
    template struct NormSite<T>;                                                                  \
    template class Model<T>;                                                                      \
    template class Adam<T>;                                                                       \
    template LossValue cross_entropy(const Matrix<T>&, std::span<const int>, double, Matrix<T>*); \
    template StepResult train_step(Model<T>&, Adam<T>&, const std::vector<TokenBatch>&,           \
                                   const TrainConfig&, std::uint64_t, bool);                      \
    template EvalResult evaluate(Model<T>&, const std::vector<Sequence>&, std::size_t);

POWERNORM_INSTANTIATE(float)
POWERNORM_INSTANTIATE(double)

#undef POWERNORM_INSTANTIATE

} // namespace powernorm

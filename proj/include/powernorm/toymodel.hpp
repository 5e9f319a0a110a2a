#pragma once

// A small pre-norm transformer encoder with pluggable normalization, written
// out by hand (forward and backward) on top of the normalization layers.
//
// Layout of one encoder layer, h being the residual stream over the
// flattened non-padded tokens of a batch:
//
//   h = h + Dropout(MHA(Norm1(LS1(h))))
//   h = h + Dropout(FFN(Norm2(LS2(h))))
//
// LS is the optional layer-scale in front of each normalization. After the
// last layer a final Norm (with its own LS) feeds the output projection.
// With zero layers the model is embedding -> output projection.

#include "powernorm/instrumentation.hpp"
#include "powernorm/normalization.hpp"
#include "powernorm/state_io.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace powernorm {

enum class EmbeddingInit { Normal, Identity };

struct ModelConfig {
    std::size_t vocab_size = 0;
    std::size_t d_model = 32;
    std::size_t n_heads = 2;
    std::size_t n_layers = 2;
    std::size_t ffn_dim = 64;
    NormKind norm_kind = NormKind::LN;
    bool layer_scale_enabled = false;
    std::uint64_t seed = 1;

    std::size_t max_len = 128;  // longest sequence the positional table covers
    bool causal = true;         // causal attention (LM) or none (copy task)
    EmbeddingInit embedding_init = EmbeddingInit::Normal;

    double eps = kDefaultEps;
    double bn_alpha = kDefaultBnAlpha;
    double pn_alpha_fwd = kDefaultPnAlpha;
    double pn_alpha_bwd = kDefaultPnAlpha;
    std::uint64_t pn_warmup_steps = 0;  // in forward passes, i.e. micro-steps

    // Throws InvalidConfig.
    void validate() const;
};

struct TrainConfig {
    std::size_t total_tokens_per_step = 2048;
    std::size_t micro_batch_tokens = 2048;
    double lr = 5e-4;
    std::uint64_t lr_warmup_steps = 400;
    std::uint64_t max_steps = 2000;
    double label_smoothing = 0.1;
    double dropout = 0.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.98;
    double adam_eps = 1e-8;

    // Throws InvalidConfig unless micro_batch_tokens divides
    // total_tokens_per_step.
    void validate() const;
    std::size_t accumulation_count() const { return total_tokens_per_step / micro_batch_tokens; }
};

// Linear warmup to `lr` over `warmup` steps, then lr * sqrt(warmup / step).
// With warmup = 0 the rate is constant. Steps count from 1.
double learning_rate(const TrainConfig& cfg, std::uint64_t step);

// ---------------------------------------------------------------------------
// Token batches

inline constexpr int kIgnoreTarget = -1;

struct Sequence {
    std::vector<int> tokens;
    std::vector<int> targets;  // same length; kIgnoreTarget where no loss
};

// Sentences padded to a common length, sentence-major. Position p of
// sentence s is real iff p < lengths[s]; everything else is padding and
// never reaches the model.
struct TokenBatch {
    std::size_t num_sentences = 0;
    std::size_t max_len = 0;
    std::vector<int> tokens;
    std::vector<int> targets;
    std::vector<std::size_t> lengths;

    // pad_to = 0 pads to the longest sentence.
    static TokenBatch from_sequences(const std::vector<Sequence>& seqs, std::size_t pad_to = 0);

    std::size_t token_count() const;
    std::size_t target_count() const;
};

// Splits sentences into `count` contiguous groups of roughly equal token
// count. Throws InvalidConfig if there are fewer sentences than groups.
std::vector<TokenBatch> split_micro_batches(const std::vector<Sequence>& seqs, std::size_t count);

// ---------------------------------------------------------------------------
// Model

template <Real T>
struct ParamRef {
    std::string name;
    std::span<T> value;
    std::span<T> grad;
    std::size_t rows = 0;
    std::size_t cols = 0;
};

template <Real T>
struct Linear {
    Matrix<T> w;  // in x out
    Vector<T> b;
    Matrix<T> dw;
    Vector<T> db;
    Matrix<T> input;  // cached by forward

    Linear() = default;
    Linear(std::size_t in, std::size_t out, std::mt19937_64& rng);

    Matrix<T> forward(const Matrix<T>& x, bool keep_input = true);
    // Accumulates weight * grads into dw/db and returns dL/dx.
    Matrix<T> backward(const Matrix<T>& dy, T weight);
};

template <Real T>
struct NormSite {
    std::string name;
    NormKind kind = NormKind::LN;
    bool layer_scale = false;
    T eps = T(kDefaultEps);

    AffineParams<T> params;
    Vector<T> dgamma;
    Vector<T> dbeta;
    Vector<T> scale;  // layer-scale, ones at init
    Vector<T> dscale;

    BNRunningState<T> bn;
    PNVRunningState<T> pnv;
    PNState<T> pn;

    BackwardCache<T> cache;
    Matrix<T> scale_input;

    NormSite() = default;
    NormSite(std::string name, const ModelConfig& cfg);

    Matrix<T> forward(const Matrix<T>& x, Mode mode, bool instrument);
    Matrix<T> backward(const Matrix<T>& dy, T weight);

    // Length of the running-state vectors this site carries.
    std::size_t state_size() const;
    StateSnapshot snapshot() const;
    void restore(const StateSnapshot& snap);
};

template <Real T>
struct AttentionCache {
    Matrix<T> q, k, v, ctx;
    std::vector<std::vector<T>> probs;  // per (sentence, head): L x L row-major
};

template <Real T>
struct EncoderLayer {
    NormSite<T> norm1;
    Linear<T> wq, wk, wv, wo;
    NormSite<T> norm2;
    Linear<T> ff1, ff2;

    AttentionCache<T> attn;
    Matrix<T> relu_mask;
    Matrix<T> drop1, drop2;  // empty when dropout is off
};

template <Real T>
struct ForwardPass {
    Matrix<T> logits;          // one row per real token
    std::vector<int> targets;  // aligned with logits rows
};

template <Real T>
class Model {
public:
    explicit Model(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }

    // Training mode updates BN/PN-V/PN running state; inference mode only
    // reads it. `dropout` applies in training mode only.
    ForwardPass<T> forward(const TokenBatch& batch, Mode mode, bool instrument = false,
                           double dropout = 0.0);
    // Backpropagates dL/dlogits of the last training forward and adds
    // weight * gradient into every parameter gradient.
    void backward(const Matrix<T>& dlogits, T weight = T(1));

    void zero_grad();
    std::vector<ParamRef<T>> parameters();
    std::size_t parameter_count() const;
    std::size_t norm_state_size() const;

    std::vector<NormSite<T>*> norm_sites();
    std::vector<const NormSite<T>*> norm_sites() const;

    Matrix<T>& token_embedding() { return tok_emb_; }
    const Matrix<T>& token_embedding() const { return tok_emb_; }

    StateSnapshot norm_state_snapshot() const;
    void load_norm_state(const StateSnapshot& snap);

private:
    ModelConfig cfg_;
    Matrix<T> tok_emb_, dtok_emb_;
    Matrix<T> pos_emb_, dpos_emb_;
    std::vector<EncoderLayer<T>> layers_;
    NormSite<T> final_norm_;
    Linear<T> out_;
    std::mt19937_64 dropout_rng_;

    // Last forward
    std::vector<std::size_t> offsets_;  // first row of each sentence
    std::vector<std::size_t> lengths_;
    std::vector<int> flat_tokens_;
    std::vector<std::size_t> flat_pos_;
    double dropout_ = 0.0;

    Matrix<T> attention_forward(EncoderLayer<T>& layer, const Matrix<T>& x);
    Matrix<T> attention_backward(EncoderLayer<T>& layer, const Matrix<T>& dout, T weight);
    Matrix<T> dropout_mask(std::size_t rows, std::size_t cols);
};

// ---------------------------------------------------------------------------
// Loss, optimizer, training

struct LossValue {
    double loss = 0;      // mean over targeted rows
    std::size_t count = 0;
};

// Label-smoothed cross entropy: target distribution (1 - s) onehot + s / V.
// Writes dL/dlogits of the mean loss into `grad` (zero rows where ignored).
// Throws EmptyBatch when no row has a target.
template <Real T>
LossValue cross_entropy(const Matrix<T>& logits, std::span<const int> targets, double smoothing,
                        Matrix<T>* grad);

template <Real T>
class Adam {
public:
    Adam(Model<T>& model, const TrainConfig& cfg);
    void step(double lr);
    std::uint64_t steps() const { return t_; }

private:
    Model<T>& model_;
    double beta1_, beta2_, eps_;
    std::uint64_t t_ = 0;
    std::vector<std::vector<T>> m_, v_;
};

struct StepResult {
    double loss = 0;  // token-weighted mean of the micro-batch training losses
    double lr = 0;
    std::size_t micro_steps = 0;
    std::size_t tokens = 0;
    std::vector<MetricsRecord> metrics;  // filled when requested
};

// One optimizer step over `micro_batches`: forward/backward each micro-batch
// on its own (so normalization statistics come from that micro-batch alone),
// add its gradient weighted by its share of the targeted tokens, then apply
// one Adam update. `step` counts from 1.
template <Real T>
StepResult train_step(Model<T>& model, Adam<T>& opt, const std::vector<TokenBatch>& micro_batches,
                      const TrainConfig& cfg, std::uint64_t step, bool collect = false);

struct EvalResult {
    double mean_loss = 0;  // plain cross entropy, nats per token
    double perplexity = 0;
    std::size_t tokens = 0;
};

// Inference-mode evaluation over `corpus`, `batch_sentences` at a time.
// Throws EmptyCorpus when there is no targeted token.
template <Real T>
EvalResult evaluate(Model<T>& model, const std::vector<Sequence>& corpus,
                    std::size_t batch_sentences = 32);

// ---------------------------------------------------------------------------
// Checkpoints
//
// A checkpoint directory holds
//   norm_state.bin / norm_state.json  normalization state (state_io format)
//   params.bin                        every parameter as little-endian f64,
//                                     in parameters() order
//   checkpoint.json                   model config, step, parameter table

template <Real T>
void save_checkpoint(Model<T>& model, const std::filesystem::path& dir, std::uint64_t step);

// Rebuilds the model from checkpoint.json and loads parameters and state.
template <Real T>
Model<T> load_checkpoint(const std::filesystem::path& dir);

std::string model_config_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

} // namespace powernorm

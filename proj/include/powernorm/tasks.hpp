#pragma once

// Data for the toy model: a synthetic copy task, a character-level corpus,
// and synthetic activation streams for replaying a single normalization
// layer.

#include "powernorm/normalization.hpp"
#include "powernorm/toymodel.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace powernorm {

// ---------------------------------------------------------------------------
// Copy task
//
//   tokens:  a_1 ... a_L SEP BLANK ... BLANK   (L blanks)
//   targets: -   ...  -   -   a_1   ... a_L
//
// with L drawn uniformly from [min_len, max_len] per sentence.

struct CopyTaskConfig {
    std::size_t num_symbols = 8;
    std::size_t min_len = 2;
    std::size_t max_len = 6;
};

class CopyTask {
public:
    explicit CopyTask(CopyTaskConfig cfg);

    std::size_t vocab_size() const { return cfg_.num_symbols + 2; }
    int sep() const { return static_cast<int>(cfg_.num_symbols); }
    int blank() const { return static_cast<int>(cfg_.num_symbols) + 1; }
    std::size_t longest_sequence() const { return 2 * cfg_.max_len + 1; }

    Sequence sample(std::mt19937_64& rng) const;
    // Sentences until their token count reaches at least `tokens`.
    std::vector<Sequence> sample_tokens(std::size_t tokens, std::mt19937_64& rng) const;
    std::vector<Sequence> eval_set(std::size_t sentences, std::uint64_t seed) const;

private:
    CopyTaskConfig cfg_;
};

// ---------------------------------------------------------------------------
// Character-level language modelling

class CharCorpus {
public:
    // The vocabulary is the sorted set of bytes of the whole text; the first
    // `train_fraction` of the bytes is the training split, the rest is held
    // out. Throws EmptyCorpus when either split is too short to use.
    static CharCorpus from_text(const std::string& text, double train_fraction = 0.9);
    static CharCorpus from_file(const std::filesystem::path& path, double train_fraction = 0.9);

    std::size_t vocab_size() const { return vocab_.size(); }
    const std::vector<int>& train() const { return train_; }
    const std::vector<int>& held_out() const { return held_out_; }

    // Random windows of the training split with lengths in [min_len, max_len]
    // until at least `tokens` tokens; each position predicts the next byte.
    std::vector<Sequence> sample_tokens(std::size_t tokens, std::size_t min_len, std::size_t max_len,
                                        std::mt19937_64& rng) const;
    // Consecutive non-overlapping windows of the held-out split.
    std::vector<Sequence> eval_set(std::size_t seq_len, std::size_t max_sentences = 0) const;

private:
    std::vector<unsigned char> vocab_;
    std::vector<int> train_;
    std::vector<int> held_out_;
};

// ---------------------------------------------------------------------------
// Synthetic activation streams

enum class StreamKind { Gaussian, ZipfianVarlen };

std::string_view to_string(StreamKind kind);
// "gaussian" or "zipfian_varlen"; throws InvalidConfig otherwise.
StreamKind parse_stream_kind(std::string_view name);

struct SynthStreamConfig {
    StreamKind kind = StreamKind::Gaussian;
    std::size_t dim = 16;
    std::size_t tokens_per_batch = 256;
    std::uint64_t seed = 1;
    double mean_offset = 1.0;  // shared mean of every feature (scaled per feature for zipfian)

    // gaussian: fixed-length sentences of i.i.d. N(mean, I) rows
    std::size_t sentence_len = 32;

    // zipfian_varlen: each token id has a fixed embedding
    //   e_t = m + token_scale * z_t,   z_t ~ N(0, I)
    // with ids drawn from a Zipf law; every sentence adds its own offset
    // sentence_scale * c_s, c_s ~ N(0, I), to all of its tokens.
    std::size_t vocab = 1000;
    double zipf_exponent = 1.1;
    double token_scale = 0.6;
    double sentence_scale = 0.8;
    std::size_t min_len = 4;
    std::size_t max_len = 64;

    void validate() const;
};

class SynthStream {
public:
    explicit SynthStream(SynthStreamConfig cfg);

    // Exactly tokens_per_batch real rows, padded per sentence.
    PaddedBatch<double> next();

    const SynthStreamConfig& config() const { return cfg_; }

private:
    SynthStreamConfig cfg_;
    std::mt19937_64 rng_;
    std::vector<double> mean_;
    MatrixD embeddings_;
    std::discrete_distribution<std::size_t> zipf_;
};

} // namespace powernorm

#include "powernorm/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace powernorm {

// ---------------------------------------------------------------------------
// Copy task

CopyTask::CopyTask(CopyTaskConfig cfg) : cfg_(cfg) {
    if (cfg_.num_symbols == 0) throw InvalidConfig("CopyTask: need at least one symbol");
    if (cfg_.min_len == 0 || cfg_.min_len > cfg_.max_len) {
        throw InvalidConfig("CopyTask: need 1 <= min_len <= max_len");
    }
}

Sequence CopyTask::sample(std::mt19937_64& rng) const {
    std::uniform_int_distribution<std::size_t> len(cfg_.min_len, cfg_.max_len);
    std::uniform_int_distribution<int> sym(0, static_cast<int>(cfg_.num_symbols) - 1);
    const std::size_t L = len(rng);
    Sequence s;
    s.tokens.reserve(2 * L + 1);
    for (std::size_t k = 0; k < L; ++k) s.tokens.push_back(sym(rng));
    s.targets.assign(L + 1, kIgnoreTarget);
    s.tokens.push_back(sep());
    for (std::size_t k = 0; k < L; ++k) {
        s.targets.push_back(s.tokens[k]);
        s.tokens.push_back(blank());
    }
    return s;
}

std::vector<Sequence> CopyTask::sample_tokens(std::size_t tokens, std::mt19937_64& rng) const {
    std::vector<Sequence> out;
    std::size_t n = 0;
    while (n < tokens) {
        out.push_back(sample(rng));
        n += out.back().tokens.size();
    }
    return out;
}

std::vector<Sequence> CopyTask::eval_set(std::size_t sentences, std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    std::vector<Sequence> out;
    for (std::size_t i = 0; i < sentences; ++i) out.push_back(sample(rng));
    return out;
}

// ---------------------------------------------------------------------------
// Character corpus

CharCorpus CharCorpus::from_text(const std::string& text, double train_fraction) {
    if (!(train_fraction > 0 && train_fraction < 1)) {
        throw InvalidConfig("CharCorpus: train_fraction must lie in (0,1)");
    }
    CharCorpus c;
    std::vector<bool> seen(256, false);
    for (unsigned char ch : text) seen[ch] = true;
    std::vector<int> index(256, -1);
    for (int b = 0; b < 256; ++b) {
        if (seen[b]) {
            index[b] = static_cast<int>(c.vocab_.size());
            c.vocab_.push_back(static_cast<unsigned char>(b));
        }
    }
    const auto split = static_cast<std::size_t>(static_cast<double>(text.size()) * train_fraction);
    for (std::size_t i = 0; i < text.size(); ++i) {
        const int id = index[static_cast<unsigned char>(text[i])];
        (i < split ? c.train_ : c.held_out_).push_back(id);
    }
    if (c.train_.size() < 2 || c.held_out_.size() < 2) {
        throw EmptyCorpus("CharCorpus: text too short (" + std::to_string(text.size()) + " bytes)");
    }
    return c;
}

CharCorpus CharCorpus::from_file(const std::filesystem::path& path, double train_fraction) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw EmptyCorpus("CharCorpus: cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_text(ss.str(), train_fraction);
}

namespace {

Sequence window(const std::vector<int>& ids, std::size_t start, std::size_t len) {
    Sequence s;
    s.tokens.assign(ids.begin() + static_cast<std::ptrdiff_t>(start),
                    ids.begin() + static_cast<std::ptrdiff_t>(start + len));
    s.targets.assign(ids.begin() + static_cast<std::ptrdiff_t>(start + 1),
                     ids.begin() + static_cast<std::ptrdiff_t>(start + len + 1));
    return s;
}

} // namespace

std::vector<Sequence> CharCorpus::sample_tokens(std::size_t tokens, std::size_t min_len, std::size_t max_len,
                                                std::mt19937_64& rng) const {
    if (min_len == 0 || min_len > max_len) throw InvalidConfig("CharCorpus: need 1 <= min_len <= max_len");
    if (train_.size() < max_len + 1) throw EmptyCorpus("CharCorpus: training split shorter than max_len");
    std::uniform_int_distribution<std::size_t> len(min_len, max_len);
    std::vector<Sequence> out;
    std::size_t n = 0;
    while (n < tokens) {
        const std::size_t L = len(rng);
        std::uniform_int_distribution<std::size_t> start(0, train_.size() - L - 1);
        out.push_back(window(train_, start(rng), L));
        n += L;
    }
    return out;
}

std::vector<Sequence> CharCorpus::eval_set(std::size_t seq_len, std::size_t max_sentences) const {
    if (seq_len == 0) throw InvalidConfig("CharCorpus: seq_len must be > 0");
    std::vector<Sequence> out;
    for (std::size_t start = 0; start + 1 < held_out_.size(); start += seq_len) {
        const std::size_t L = std::min(seq_len, held_out_.size() - 1 - start);
        out.push_back(window(held_out_, start, L));
        if (max_sentences && out.size() == max_sentences) break;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic streams

std::string_view to_string(StreamKind kind) {
    return kind == StreamKind::Gaussian ? "gaussian" : "zipfian_varlen";
}

StreamKind parse_stream_kind(std::string_view name) {
    if (name == "gaussian") return StreamKind::Gaussian;
    if (name == "zipfian_varlen") return StreamKind::ZipfianVarlen;
    throw InvalidConfig("unknown stream kind '" + std::string(name) + "'");
}

void SynthStreamConfig::validate() const {
    if (dim == 0 || tokens_per_batch == 0) throw InvalidConfig("SynthStream: dim and tokens_per_batch must be > 0");
    if (kind == StreamKind::Gaussian) {
        if (sentence_len == 0 || tokens_per_batch % sentence_len != 0) {
            throw InvalidConfig("SynthStream: sentence_len must divide tokens_per_batch");
        }
    } else {
        if (vocab == 0) throw InvalidConfig("SynthStream: vocab must be > 0");
        if (!(zipf_exponent > 0)) throw InvalidConfig("SynthStream: zipf_exponent must be > 0");
        if (min_len == 0 || min_len > max_len) throw InvalidConfig("SynthStream: need 1 <= min_len <= max_len");
        if (!(token_scale >= 0 && sentence_scale >= 0)) throw InvalidConfig("SynthStream: scales must be >= 0");
    }
}

SynthStream::SynthStream(SynthStreamConfig cfg) : cfg_(cfg), rng_(cfg.seed) {
    cfg_.validate();
    const std::size_t d = cfg_.dim;
    mean_.assign(d, cfg_.mean_offset);
    if (cfg_.kind == StreamKind::ZipfianVarlen) {
        // Anisotropic shared mean: feature j gets offset * (0.5 + j / d).
        for (std::size_t j = 0; j < d; ++j) {
            mean_[j] = cfg_.mean_offset * (0.5 + static_cast<double>(j) / static_cast<double>(d));
        }
        std::normal_distribution<double> normal(0.0, 1.0);
        embeddings_ = MatrixD(cfg_.vocab, d);
        for (auto& v : embeddings_.values()) v = normal(rng_);
        std::vector<double> w(cfg_.vocab);
        for (std::size_t r = 0; r < cfg_.vocab; ++r) w[r] = std::pow(static_cast<double>(r + 1), -cfg_.zipf_exponent);
        zipf_ = std::discrete_distribution<std::size_t>(w.begin(), w.end());
    }
}

PaddedBatch<double> SynthStream::next() {
    const std::size_t d = cfg_.dim;
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<MatrixD> sentences;

    if (cfg_.kind == StreamKind::Gaussian) {
        for (std::size_t s = 0; s < cfg_.tokens_per_batch / cfg_.sentence_len; ++s) {
            MatrixD m(cfg_.sentence_len, d);
            for (std::size_t i = 0; i < m.rows(); ++i)
                for (std::size_t j = 0; j < d; ++j) m(i, j) = mean_[j] + normal(rng_);
            sentences.push_back(std::move(m));
        }
        return PaddedBatch<double>::from_sentences(sentences);
    }

    std::uniform_int_distribution<std::size_t> len(cfg_.min_len, cfg_.max_len);
    std::size_t remaining = cfg_.tokens_per_batch;
    std::vector<double> offset(d);
    while (remaining > 0) {
        const std::size_t L = std::min(len(rng_), remaining);
        for (auto& c : offset) c = cfg_.sentence_scale * normal(rng_);
        MatrixD m(L, d);
        for (std::size_t i = 0; i < L; ++i) {
            const auto e = embeddings_.row(zipf_(rng_));
            for (std::size_t j = 0; j < d; ++j) m(i, j) = mean_[j] + cfg_.token_scale * e[j] + offset[j];
        }
        sentences.push_back(std::move(m));
        remaining -= L;
    }
    return PaddedBatch<double>::from_sentences(sentences);
}

} // namespace powernorm

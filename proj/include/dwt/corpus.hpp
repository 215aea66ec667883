#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dwt/error.hpp"
#include "dwt/rng.hpp"

namespace dwt {

using Token = std::uint32_t;

// Reserved ids; regular tokens start at kFirstRegular.
inline constexpr Token kPad = 0;
inline constexpr Token kMask = 1;
inline constexpr Token kCls = 2;
inline constexpr Token kSep = 3;
inline constexpr Token kFirstRegular = 4;
inline constexpr std::size_t kMinVocab = 8;

struct CorpusParams {
    std::size_t vocab = 64;
    std::size_t length = 200000;
    std::size_t order = 2;
    double sharpness = 0.1;
    std::uint64_t seed = 7;
};

struct Corpus {
    std::vector<Token> tokens;
    std::size_t vocab = 0;
    std::uint64_t seed = 0;
    // Generator metadata. Zero when loaded from a file (the on-disk header
    // only carries V, length and seed).
    std::size_t order = 0;
    double sharpness = 0.0;

    std::size_t size() const { return tokens.size(); }
    bool empty() const { return tokens.empty(); }
};

namespace detail {

// Lazily materialised Dirichlet transition rows, one per context. A row
// depends only on (seed, context key), never on visiting order.
class TransitionTable {
public:
    TransitionTable(std::uint64_t seed, std::size_t states, double concentration)
        : seed_(seed), states_(states), concentration_(concentration) {}

    const std::vector<double>& cdf(std::uint64_t context) {
        auto it = rows_.find(context);
        if (it != rows_.end()) return it->second;
        Rng rng(derive_seed(seed_, {0x7472616e73ULL, context}));
        std::gamma_distribution<double> gamma(concentration_, 1.0);
        std::vector<double> row(states_);
        double total = 0.0;
        for (double& v : row) {
            v = gamma(rng);
            total += v;
        }
        if (!(total > 0.0)) {
            // every draw underflowed; fall back to a point mass
            std::fill(row.begin(), row.end(), 0.0);
            row[uniform_below(rng, states_)] = 1.0;
            total = 1.0;
        }
        double acc = 0.0;
        for (double& v : row) {
            acc += v / total;
            v = acc;
        }
        row.back() = 1.0;
        return rows_.emplace(context, std::move(row)).first->second;
    }

    std::size_t sample(std::uint64_t context, double u) {
        const std::vector<double>& c = cdf(context);
        const auto it = std::upper_bound(c.begin(), c.end(), u);
        return static_cast<std::size_t>(std::min<std::ptrdiff_t>(it - c.begin(), c.size() - 1));
    }

private:
    std::uint64_t seed_;
    std::size_t states_;
    double concentration_;
    std::unordered_map<std::uint64_t, std::vector<double>> rows_;
};

}  // namespace detail

// Order-k Markov stream over the regular ids [4, V). Each context's next-token
// distribution is a Dirichlet(sharpness) draw: small sharpness gives nearly
// deterministic transitions, large sharpness nearly uniform ones.
inline Corpus gen_corpus(const CorpusParams& p) {
    if (p.vocab < kMinVocab) {
        throw ConfigError("vocab size must be at least " + std::to_string(kMinVocab) + " (ids 0-3 are reserved), got " +
                          std::to_string(p.vocab));
    }
    if (p.length == 0) throw ConfigError("corpus length must be positive");
    if (p.order == 0) throw ConfigError("Markov order must be at least 1");
    if (!(p.sharpness > 0.0) || !std::isfinite(p.sharpness)) {
        throw ConfigError("transition sharpness must be positive, got " + std::to_string(p.sharpness));
    }
    const std::uint64_t states = p.vocab - kFirstRegular;
    // context keys are base-`states` numbers with `order` digits
    double key_space = std::pow(static_cast<double>(states), static_cast<double>(p.order));
    if (key_space >= 9.0e18) throw ConfigError("vocab^order too large for context keys");

    detail::TransitionTable table(p.seed, states, p.sharpness);
    Rng rng(derive_seed(p.seed, {0x73747265616dULL}));
    Corpus c;
    c.vocab = p.vocab;
    c.seed = p.seed;
    c.order = p.order;
    c.sharpness = p.sharpness;
    c.tokens.reserve(p.length);

    std::vector<std::uint64_t> ctx(p.order);
    for (std::size_t i = 0; i < p.order; ++i) ctx[i] = uniform_below(rng, states);
    std::uint64_t modulus = 1;
    for (std::size_t i = 1; i < p.order; ++i) modulus *= states;
    std::uint64_t key = 0;
    for (std::uint64_t s : ctx) key = key * states + s;

    for (std::size_t i = 0; i < p.length; ++i) {
        const std::uint64_t next = table.sample(key, uniform01(rng));
        c.tokens.push_back(static_cast<Token>(next + kFirstRegular));
        key = (key % modulus) * states + next;
    }
    return c;
}

enum class MaskAction : std::uint8_t { Mask, Random, Keep };

struct MlmBatch {
    std::size_t batch = 0;
    std::size_t seq_len = 0;
    // batch × seq_len, row-major, after masking.
    std::vector<Token> input_ids;
    // Sorted positions per example.
    std::vector<std::vector<std::size_t>> masked_positions;
    // Original token at each masked position, example-major then by position.
    std::vector<Token> labels;
    // What was done at each masked position, aligned with labels.
    std::vector<MaskAction> actions;

    std::size_t num_masked() const { return labels.size(); }

    // Row indices into the flattened (batch·seq_len) token axis, aligned with labels.
    std::vector<std::size_t> flat_masked_indices() const {
        std::vector<std::size_t> out;
        out.reserve(labels.size());
        for (std::size_t b = 0; b < masked_positions.size(); ++b) {
            for (std::size_t p : masked_positions[b]) out.push_back(b * seq_len + p);
        }
        return out;
    }
};

inline std::size_t masked_count(std::size_t seq_len, double mask_rate) {
    return static_cast<std::size_t>(std::llround(mask_rate * static_cast<double>(seq_len)));
}

// BERT-style masking of B random windows. Pure function of its arguments:
// window starts, masked positions and the 80/10/10 replacement draws all come
// from a stream seeded by (seed, step).
inline MlmBatch make_mlm_batch(const Corpus& corpus, std::size_t batch, std::size_t seq_len, double mask_rate,
                               std::uint64_t seed, std::uint64_t step) {
    if (corpus.empty()) throw DataError("cannot build a batch from an empty corpus");
    if (!(mask_rate >= 0.0 && mask_rate <= 1.0)) {
        throw ParameterError("mask rate must lie in [0, 1], got " + std::to_string(mask_rate));
    }
    if (seq_len == 0 || seq_len > corpus.size()) {
        throw DataError("sequence length " + std::to_string(seq_len) + " incompatible with corpus of " +
                        std::to_string(corpus.size()) + " tokens");
    }
    if (corpus.vocab <= kFirstRegular) throw DataError("corpus has no regular tokens");
    Rng rng(derive_seed(seed, {0x6d6c6dULL, step}));
    const std::size_t k = masked_count(seq_len, mask_rate);
    const std::uint64_t regular = corpus.vocab - kFirstRegular;

    MlmBatch out;
    out.batch = batch;
    out.seq_len = seq_len;
    out.input_ids.resize(batch * seq_len);
    out.masked_positions.resize(batch);
    out.labels.reserve(batch * k);
    out.actions.reserve(batch * k);
    std::vector<std::size_t> perm(seq_len);
    for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t start = uniform_below(rng, corpus.size() - seq_len + 1);
        Token* row = out.input_ids.data() + b * seq_len;
        std::copy_n(corpus.tokens.begin() + static_cast<std::ptrdiff_t>(start), seq_len, row);

        std::iota(perm.begin(), perm.end(), std::size_t{0});
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t j = i + uniform_below(rng, seq_len - i);
            std::swap(perm[i], perm[j]);
        }
        std::vector<std::size_t> chosen(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(k));
        std::sort(chosen.begin(), chosen.end());
        for (std::size_t pos : chosen) {
            out.labels.push_back(row[pos]);
            const double u = uniform01(rng);
            if (u < 0.8) {
                row[pos] = kMask;
                out.actions.push_back(MaskAction::Mask);
            } else if (u < 0.9) {
                row[pos] = static_cast<Token>(kFirstRegular + uniform_below(rng, regular));
                out.actions.push_back(MaskAction::Random);
            } else {
                out.actions.push_back(MaskAction::Keep);
            }
        }
        out.masked_positions[b] = std::move(chosen);
    }
    return out;
}

// Contiguous split: the tail round(dev_fraction·len) tokens become dev.
inline std::pair<Corpus, Corpus> train_dev_split(const Corpus& corpus, double dev_fraction) {
    if (!(dev_fraction > 0.0 && dev_fraction < 0.5)) {
        throw ParameterError("dev fraction must lie in (0, 0.5), got " + std::to_string(dev_fraction));
    }
    const auto dev_len = static_cast<std::size_t>(std::llround(dev_fraction * static_cast<double>(corpus.size())));
    const std::size_t cut = corpus.size() - dev_len;
    Corpus train = corpus;
    Corpus dev = corpus;
    train.tokens.assign(corpus.tokens.begin(), corpus.tokens.begin() + static_cast<std::ptrdiff_t>(cut));
    dev.tokens.assign(corpus.tokens.begin() + static_cast<std::ptrdiff_t>(cut), corpus.tokens.end());
    return {std::move(train), std::move(dev)};
}

// Labelled sequences for the frozen-encoder probe. Class c's sequences are
// driven by a planted first-order template chain: each next token follows
// template c with probability template_weight, otherwise it is copied from a
// random window of the background corpus.
struct ProbeTask {
    std::size_t num_classes = 0;
    std::size_t seq_len = 0;
    std::size_t vocab = 0;
    std::vector<Token> ids;  // n × seq_len
    std::vector<std::size_t> labels;

    std::size_t size() const { return labels.size(); }
    std::span<const Token> sequence(std::size_t i) const {
        return std::span<const Token>(ids).subspan(i * seq_len, seq_len);
    }
};

struct ProbeParams {
    std::size_t num_classes = 2;
    std::size_t n_examples = 400;
    std::size_t seq_len = 32;
    double template_weight = 0.7;
    double template_sharpness = 0.05;
    std::uint64_t seed = 11;
};

inline ProbeTask gen_probe_task(const Corpus& corpus, const ProbeParams& p) {
    if (p.num_classes < 2) throw ParameterError("probe task needs at least 2 classes");
    if (corpus.empty() || p.seq_len == 0 || p.seq_len > corpus.size()) {
        throw DataError("probe sequence length incompatible with corpus");
    }
    if (corpus.vocab <= kFirstRegular) throw DataError("corpus has no regular tokens");
    const std::size_t states = corpus.vocab - kFirstRegular;
    std::vector<detail::TransitionTable> templates;
    for (std::size_t c = 0; c < p.num_classes; ++c) {
        templates.emplace_back(derive_seed(p.seed, {0x74656d706cULL, c}), states, p.template_sharpness);
    }
    Rng rng(derive_seed(p.seed, {0x70726f6265ULL}));

    ProbeTask task;
    task.num_classes = p.num_classes;
    task.seq_len = p.seq_len;
    task.vocab = corpus.vocab;
    task.labels.resize(p.n_examples);
    for (std::size_t i = 0; i < p.n_examples; ++i) task.labels[i] = i % p.num_classes;
    std::shuffle(task.labels.begin(), task.labels.end(), rng);
    task.ids.resize(p.n_examples * p.seq_len);
    for (std::size_t i = 0; i < p.n_examples; ++i) {
        const std::size_t start = uniform_below(rng, corpus.size() - p.seq_len + 1);
        Token* row = task.ids.data() + i * p.seq_len;
        row[0] = corpus.tokens[start];
        for (std::size_t t = 1; t < p.seq_len; ++t) {
            if (uniform01(rng) < p.template_weight) {
                const std::size_t prev = row[t - 1] - kFirstRegular;
                row[t] = static_cast<Token>(kFirstRegular + templates[task.labels[i]].sample(prev, uniform01(rng)));
            } else {
                row[t] = corpus.tokens[start + t];
            }
        }
    }
    return task;
}

// On-disk corpus: one ASCII header line, then little-endian u32 ids.
inline void write_corpus(const Corpus& c, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open " + path + " for writing");
    out << "DWT-CORPUS v1 V=" << c.vocab << " len=" << c.size() << " seed=" << c.seed << '\n';
    std::vector<unsigned char> buf(c.size() * 4);
    for (std::size_t i = 0; i < c.size(); ++i) {
        const Token t = c.tokens[i];
        for (int b = 0; b < 4; ++b) buf[i * 4 + b] = static_cast<unsigned char>((t >> (8 * b)) & 0xff);
    }
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw DataError("failed writing " + path);
}

inline Corpus read_corpus(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open corpus file " + path);
    std::string header;
    std::getline(in, header);
    Corpus c;
    std::size_t len = 0;
    unsigned long long seed = 0;
    char tail = 0;
    if (std::sscanf(header.c_str(), "DWT-CORPUS v1 V=%zu len=%zu seed=%llu%c", &c.vocab, &len, &seed, &tail) != 3) {
        throw FormatError(path + ": malformed corpus header '" + header + "'");
    }
    c.seed = seed;
    std::vector<unsigned char> buf(len * 4);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(in.gcount()) != buf.size()) {
        throw FormatError(path + ": expected " + std::to_string(len) + " tokens, file is truncated");
    }
    if (in.peek() != std::char_traits<char>::eof()) throw FormatError(path + ": trailing bytes after token payload");
    c.tokens.resize(len);
    for (std::size_t i = 0; i < len; ++i) {
        Token t = 0;
        for (int b = 0; b < 4; ++b) t |= static_cast<Token>(buf[i * 4 + b]) << (8 * b);
        if (t >= c.vocab) throw FormatError(path + ": token id " + std::to_string(t) + " >= V");
        c.tokens[i] = t;
    }
    return c;
}

}  // namespace dwt

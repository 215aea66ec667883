#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "dwt/corpus.hpp"

using namespace dwt;

namespace {

double unigram_entropy(const Corpus& c) {
    std::map<Token, double> counts;
    for (Token t : c.tokens) counts[t] += 1.0;
    double h = 0.0;
    for (const auto& [t, n] : counts) {
        const double p = n / static_cast<double>(c.size());
        h -= p * std::log(p);
    }
    return h;
}

CorpusParams small(std::size_t len = 100000) {
    CorpusParams p;
    p.vocab = 64;
    p.length = len;
    p.order = 2;
    p.seed = 7;
    return p;
}

std::filesystem::path temp_file(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "dwt_test_mlm_data";
    std::filesystem::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST(Corpus, DeterministicForSeed) {
    const Corpus a = gen_corpus(small());
    const Corpus b = gen_corpus(small());
    EXPECT_EQ(a.tokens, b.tokens);
    CorpusParams other = small();
    other.seed = 8;
    EXPECT_NE(gen_corpus(other).tokens, a.tokens);
}

TEST(Corpus, IdsAvoidReservedRange) {
    const Corpus c = gen_corpus(small());
    ASSERT_EQ(c.size(), 100000u);
    for (Token t : c.tokens) {
        ASSERT_GE(t, kFirstRegular);
        ASSERT_LT(t, 64u);
    }
}

TEST(Corpus, SharpnessControlsUnigramEntropy) {
    // First-order chain: near-deterministic rows collapse onto a short cycle.
    CorpusParams peaked = small(50000), flat = small(50000);
    peaked.order = flat.order = 1;
    peaked.sharpness = 0.01;
    flat.sharpness = 100.0;
    const double h_max = std::log(60.0);
    const double h_peaked = unigram_entropy(gen_corpus(peaked));
    const double h_flat = unigram_entropy(gen_corpus(flat));
    EXPECT_GT(h_flat, 0.99 * h_max);
    EXPECT_LT(h_peaked, 0.8 * h_max);
}

TEST(Corpus, SharpnessOrdersEntropyAtHigherOrder) {
    // With 60² contexts the marginal stays broad, but the ordering holds.
    CorpusParams peaked = small(50000), flat = small(50000);
    peaked.sharpness = 0.01;
    flat.sharpness = 100.0;
    EXPECT_LT(unigram_entropy(gen_corpus(peaked)), unigram_entropy(gen_corpus(flat)));
}

TEST(Corpus, TooSmallVocabIsConfigError) {
    CorpusParams p = small(100);
    p.vocab = 7;
    EXPECT_THROW(gen_corpus(p), ConfigError);
}

TEST(Corpus, FileRoundTripAndRejection) {
    const Corpus c = gen_corpus(small(5000));
    const auto path = temp_file("c.bin");
    write_corpus(c, path.string());
    const Corpus back = read_corpus(path.string());
    EXPECT_EQ(back.tokens, c.tokens);
    EXPECT_EQ(back.vocab, c.vocab);
    EXPECT_EQ(back.seed, c.seed);

    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    EXPECT_EQ(bytes.rfind("DWT-CORPUS v1 V=64 len=5000 seed=7\n", 0), 0u);

    const auto trunc = temp_file("trunc.bin");
    std::ofstream(trunc, std::ios::binary) << bytes.substr(0, bytes.size() - 2);
    EXPECT_THROW(read_corpus(trunc.string()), FormatError);

    const auto extra = temp_file("extra.bin");
    std::ofstream(extra, std::ios::binary) << bytes << "xx";
    EXPECT_THROW(read_corpus(extra.string()), FormatError);

    const auto bad_id = temp_file("badid.bin");
    std::string mutated = bytes;
    mutated[mutated.size() - 1] = '\x7f';
    std::ofstream(bad_id, std::ios::binary) << mutated;
    EXPECT_THROW(read_corpus(bad_id.string()), FormatError);

    EXPECT_THROW(read_corpus(temp_file("missing.bin").string()), DataError);
}

TEST(Masking, ZeroRateMasksNothing) {
    const Corpus c = gen_corpus(small(2000));
    const MlmBatch b = make_mlm_batch(c, 4, 50, 0.0, 1, 0);
    EXPECT_EQ(b.num_masked(), 0u);
    EXPECT_TRUE(b.labels.empty());
}

TEST(Masking, ExactCountPerExample) {
    const Corpus c = gen_corpus(small(5000));
    const MlmBatch b = make_mlm_batch(c, 6, 100, 0.15, 1, 3);
    ASSERT_EQ(b.masked_positions.size(), 6u);
    for (const auto& pos : b.masked_positions) {
        EXPECT_EQ(pos.size(), 15u);
        EXPECT_TRUE(std::is_sorted(pos.begin(), pos.end()));
        EXPECT_EQ(std::adjacent_find(pos.begin(), pos.end()), pos.end());
    }
    EXPECT_EQ(b.num_masked(), 90u);
    EXPECT_EQ(b.flat_masked_indices().size(), 90u);
}

TEST(Masking, ReplacementFrequencies) {
    const Corpus c = gen_corpus(small(20000));
    std::size_t n = 0, mask = 0, rnd = 0, keep = 0;
    for (std::uint64_t step = 0; n < 100000; ++step) {
        const MlmBatch b = make_mlm_batch(c, 32, 64, 0.15, 5, step);
        const auto flat = b.flat_masked_indices();
        for (std::size_t i = 0; i < b.num_masked(); ++i) {
            const Token shown = b.input_ids[flat[i]];
            switch (b.actions[i]) {
                case MaskAction::Mask:
                    ++mask;
                    EXPECT_EQ(shown, kMask);
                    break;
                case MaskAction::Random:
                    ++rnd;
                    EXPECT_GE(shown, kFirstRegular);
                    break;
                case MaskAction::Keep:
                    ++keep;
                    EXPECT_EQ(shown, b.labels[i]);
                    break;
            }
        }
        n += b.num_masked();
    }
    const double total = static_cast<double>(n);
    EXPECT_NEAR(mask / total, 0.80, 0.01);
    EXPECT_NEAR(rnd / total, 0.10, 0.01);
    EXPECT_NEAR(keep / total, 0.10, 0.01);
}

TEST(Masking, DeterministicPerSeedAndStep) {
    const Corpus c = gen_corpus(small(5000));
    const MlmBatch a = make_mlm_batch(c, 4, 32, 0.15, 9, 17);
    const MlmBatch b = make_mlm_batch(c, 4, 32, 0.15, 9, 17);
    EXPECT_EQ(a.input_ids, b.input_ids);
    EXPECT_EQ(a.labels, b.labels);
    EXPECT_NE(make_mlm_batch(c, 4, 32, 0.15, 9, 18).input_ids, a.input_ids);
}

TEST(Masking, InvalidInputs) {
    Corpus empty;
    empty.vocab = 64;
    EXPECT_THROW(make_mlm_batch(empty, 1, 8, 0.15, 1, 0), DataError);
    const Corpus c = gen_corpus(small(100));
    EXPECT_THROW(make_mlm_batch(c, 1, 8, 1.5, 1, 0), ParameterError);
    EXPECT_THROW(make_mlm_batch(c, 1, 200, 0.15, 1, 0), DataError);
}

TEST(Split, TailBecomesDevAndPartitions) {
    const Corpus c = gen_corpus(small(1000));
    const auto [train, dev] = train_dev_split(c, 0.1);
    EXPECT_EQ(dev.size(), 100u);
    EXPECT_EQ(train.size(), 900u);
    std::vector<Token> joined = train.tokens;
    joined.insert(joined.end(), dev.tokens.begin(), dev.tokens.end());
    EXPECT_EQ(joined, c.tokens);
    const auto again = train_dev_split(c, 0.1);
    EXPECT_EQ(again.second.tokens, dev.tokens);
    EXPECT_THROW(train_dev_split(c, 0.0), ParameterError);
    EXPECT_THROW(train_dev_split(c, 0.5), ParameterError);
}

TEST(Probe, BalancedAndDeterministic) {
    const Corpus c = gen_corpus(small(20000));
    ProbeParams p;
    p.n_examples = 1000;
    const ProbeTask a = gen_probe_task(c, p);
    const ProbeTask b = gen_probe_task(c, p);
    EXPECT_EQ(a.ids, b.ids);
    EXPECT_EQ(a.labels, b.labels);
    const double ones = static_cast<double>(std::count(a.labels.begin(), a.labels.end(), 1u));
    EXPECT_NEAR(ones / 1000.0, 0.5, 0.02);
    for (Token t : a.ids) {
        ASSERT_GE(t, kFirstRegular);
        ASSERT_LT(t, 64u);
    }
}

// Count-based oracle: per-class bigram counts from the first half, naive
// log-likelihood classification of the second half.
TEST(Probe, BigramOracleSeparatesClasses) {
    const Corpus c = gen_corpus(small(20000));
    ProbeParams p;
    p.n_examples = 600;
    const ProbeTask task = gen_probe_task(c, p);
    const std::size_t V = task.vocab, half = task.size() / 2;
    std::vector<std::vector<double>> counts(task.num_classes, std::vector<double>(V * V, 1.0));
    std::vector<std::vector<double>> row_tot(task.num_classes, std::vector<double>(V, static_cast<double>(V)));
    for (std::size_t i = 0; i < half; ++i) {
        auto s = task.sequence(i);
        for (std::size_t t = 1; t < s.size(); ++t) {
            counts[task.labels[i]][s[t - 1] * V + s[t]] += 1.0;
            row_tot[task.labels[i]][s[t - 1]] += 1.0;
        }
    }
    std::size_t correct = 0;
    for (std::size_t i = half; i < task.size(); ++i) {
        auto s = task.sequence(i);
        std::size_t best = 0;
        double best_ll = -1e300;
        for (std::size_t k = 0; k < task.num_classes; ++k) {
            double ll = 0.0;
            for (std::size_t t = 1; t < s.size(); ++t) {
                ll += std::log(counts[k][s[t - 1] * V + s[t]] / row_tot[k][s[t - 1]]);
            }
            if (ll > best_ll) {
                best_ll = ll;
                best = k;
            }
        }
        correct += best == task.labels[i];
    }
    EXPECT_GT(static_cast<double>(correct) / static_cast<double>(task.size() - half), 0.95);
}

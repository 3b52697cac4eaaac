#pragma once

#include "phydi/random.hpp"
#include "phydi/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace phydi {

// ---------------------------------------------------------------------------
// Images

struct ImageDataset {
    std::string split;
    std::size_t channels = 3;
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t classes = 10;
    std::vector<float> images;        ///< count x channels x height x width, normalised
    std::vector<std::uint8_t> labels;

    std::size_t size() const { return labels.size(); }
    std::size_t sample_size() const { return channels * height * width; }
    std::span<const float> image(std::size_t i) const;
};

struct CifarSplits {
    ImageDataset train;
    ImageDataset test;
};

struct ChannelStats {
    std::array<double, 3> mean;
    std::array<double, 3> stddev;
};

/// The published CIFAR-10 per-channel statistics.
inline constexpr ChannelStats kCifarStats{{0.4914, 0.4822, 0.4465}, {0.2470, 0.2435, 0.2616}};

/// Size of one CIFAR-10 binary batch file.
inline constexpr std::size_t kCifarRecord = 1 + 3 * 32 * 32;
inline constexpr std::size_t kCifarRecordsPerFile = 10000;

/// Reads data_batch_{1..5}.bin and test_batch.bin from `dir` (or from its
/// cifar-10-batches-bin subdirectory). With `recompute_stats`, the train
/// split's own channel statistics replace the published ones.
CifarSplits load_cifar10(const std::filesystem::path& dir, bool recompute_stats = false);

/// Parses one binary batch file; throws FormatError on a wrong length.
ImageDataset read_cifar_file(const std::filesystem::path& file, const ChannelStats& stats);

struct SyntheticImageOptions {
    std::uint64_t seed = 0;
    std::size_t classes = 10;
    std::size_t size = 5000;
    double noise = 1.0;      ///< per-pixel Gaussian noise stddev
    double amplitude = 1.0;  ///< peak value of the class blobs
};

/// Class templates made of Gaussian colour blobs at class-specific
/// positions plus per-pixel noise. Templates depend only on the seed;
/// samples depend on (seed, split).
ImageDataset synthetic_classification(const SyntheticImageOptions& options,
                                      const std::string& split = "train");

// ---------------------------------------------------------------------------
// Tokens

struct TokenCorpus {
    static constexpr std::size_t unk = 0;
    static constexpr std::size_t eos = 1;

    std::vector<std::string> tokens;  ///< id -> token
    std::unordered_map<std::string, std::size_t> ids;
    std::vector<std::size_t> train;
    std::vector<std::size_t> valid;
    std::vector<std::size_t> test;

    std::size_t vocab_size() const { return tokens.size(); }
    std::size_t id(const std::string& token) const;
};

bool is_valid_utf8(std::string_view text);

/// Whitespace tokenisation with one eos per line. Ids follow first
/// appearance in the train text. `max_vocab` (0: unlimited) caps the
/// vocabulary, reserved ids included, to the most frequent train tokens
/// with ties broken lexicographically.
TokenCorpus build_corpus(std::string_view train, std::string_view valid, std::string_view test,
                         std::size_t max_vocab = 0);

/// Reads wiki.{train,valid,test}.tokens from `dir`.
TokenCorpus load_wikitext2(const std::filesystem::path& dir, std::size_t max_vocab = 0);

/// Order-2 Markov source over the ids 2..vocab-1.
class MarkovSource {
public:
    /// Each next-token distribution mixes a sparse bigram part (weight
    /// `bigram_weight`) with a sparse part keyed on the last two tokens.
    MarkovSource(std::uint64_t seed, std::size_t vocab, std::size_t fanout = 4,
                 double bigram_weight = 0.7);

    std::size_t vocab() const { return vocab_; }
    std::size_t symbols() const { return symbols_; }
    /// P(next | prev2, prev1), arguments are token ids.
    double probability(std::size_t prev2, std::size_t prev1, std::size_t next) const;
    std::span<const double> distribution(std::size_t prev2, std::size_t prev1) const;

    std::vector<std::size_t> sample(std::size_t length, Rng& rng) const;

    /// Stationary distribution over (prev2, prev1) pairs, by power iteration.
    std::vector<double> stationary(std::size_t max_iterations = 10000, double tol = 1e-14) const;
    /// Entropy rate in nats per token.
    double entropy_rate() const;

private:
    std::size_t vocab_;
    std::size_t symbols_;
    std::vector<double> table_;  ///< symbols^2 rows of `symbols` probabilities
};

struct SyntheticLMOptions {
    std::uint64_t seed = 0;
    std::size_t vocab = 100;
    std::size_t length = 40000;  ///< train tokens; valid and test get a tenth each
    std::size_t fanout = 4;
    double bigram_weight = 0.7;
};

struct SyntheticLM {
    TokenCorpus corpus;
    double entropy_rate;  ///< nats per token
};

SyntheticLM synthetic_lm(const SyntheticLMOptions& options);

// ---------------------------------------------------------------------------
// Batching

struct ImageBatch {
    Tensor images;  ///< B x C x H x W
    std::vector<std::size_t> labels;
};

/// Mini-batches over an image dataset. The order for an epoch depends only
/// on (seed, epoch). Training drops the final partial batch, evaluation
/// keeps it.
class ImageBatcher {
public:
    ImageBatcher(const ImageDataset& data, std::size_t batch_size, bool shuffle,
                 std::uint64_t seed, bool drop_last, bool augment = false);

    void start_epoch(std::size_t epoch);
    std::size_t batches() const;
    ImageBatch batch(std::size_t index) const;

private:
    const ImageDataset& data_;
    std::size_t batch_size_;
    bool shuffle_;
    std::uint64_t seed_;
    bool drop_last_;
    bool augment_;
    std::size_t epoch_ = 0;
    std::vector<std::size_t> order_;
};

struct TokenBatch {
    std::size_t batch = 0;
    std::size_t steps = 0;
    std::vector<std::size_t> inputs;   ///< batch x steps
    std::vector<std::size_t> targets;  ///< batch x steps, inputs shifted by one
};

/// Folds a stream into `batch_size` contiguous columns and cuts windows of
/// `steps` tokens; window i of every column forms batch i.
class TokenBatcher {
public:
    TokenBatcher(std::span<const std::size_t> stream, std::size_t batch_size, std::size_t steps,
                 bool shuffle, std::uint64_t seed, bool drop_last);

    void start_epoch(std::size_t epoch);
    std::size_t batches() const { return order_.size(); }
    TokenBatch batch(std::size_t index) const;

private:
    std::vector<std::size_t> columns_;  ///< batch_size x column_length
    std::size_t batch_size_;
    std::size_t steps_;
    std::size_t column_length_;
    bool shuffle_;
    std::uint64_t seed_;
    std::vector<std::size_t> windows_;  ///< window start offsets
    std::vector<std::size_t> order_;
};

}  // namespace phydi

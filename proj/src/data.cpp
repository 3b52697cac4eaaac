#include "phydi/data.hpp"

#include "phydi/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace phydi {

namespace {

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

std::vector<std::size_t> permutation(std::size_t count, std::uint64_t seed) {
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

}  // namespace

std::span<const float> ImageDataset::image(std::size_t i) const {
    const std::size_t stride = sample_size();
    return {images.data() + i * stride, stride};
}

// ---------------------------------------------------------------------------
// CIFAR-10

ImageDataset read_cifar_file(const std::filesystem::path& file, const ChannelStats& stats) {
    if (!std::filesystem::exists(file)) throw IoError("missing CIFAR-10 file " + file.string());
    const std::string raw = read_file(file);
    const std::size_t expected = kCifarRecord * kCifarRecordsPerFile;
    if (raw.size() != expected) {
        throw FormatError(file.string() + ": expected " + std::to_string(expected) + " bytes, got " +
                          std::to_string(raw.size()));
    }
    ImageDataset ds;
    ds.labels.resize(kCifarRecordsPerFile);
    ds.images.resize(kCifarRecordsPerFile * 3 * 1024);
    for (std::size_t r = 0; r < kCifarRecordsPerFile; ++r) {
        const auto* rec = reinterpret_cast<const unsigned char*>(raw.data()) + r * kCifarRecord;
        if (rec[0] >= 10) {
            throw FormatError(file.string() + ": record " + std::to_string(r) + " has label " +
                              std::to_string(rec[0]));
        }
        ds.labels[r] = rec[0];
        float* dst = ds.images.data() + r * 3 * 1024;
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t p = 0; p < 1024; ++p) {
                const double v = rec[1 + c * 1024 + p] / 255.0;
                dst[c * 1024 + p] = static_cast<float>((v - stats.mean[c]) / stats.stddev[c]);
            }
        }
    }
    return ds;
}

namespace {

ImageDataset concat(std::vector<ImageDataset> parts, const std::string& split) {
    ImageDataset out;
    out.split = split;
    for (auto& p : parts) {
        out.images.insert(out.images.end(), p.images.begin(), p.images.end());
        out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    }
    return out;
}

ChannelStats measured_stats(const std::filesystem::path& base) {
    // Statistics of the raw [0,1] train pixels.
    const ChannelStats identity{{0, 0, 0}, {1, 1, 1}};
    std::array<double, 3> sum{}, sq{};
    std::size_t count = 0;
    for (int i = 1; i <= 5; ++i) {
        const auto part = read_cifar_file(base / ("data_batch_" + std::to_string(i) + ".bin"), identity);
        for (std::size_t r = 0; r < part.size(); ++r) {
            const auto img = part.image(r);
            for (std::size_t c = 0; c < 3; ++c) {
                for (std::size_t p = 0; p < 1024; ++p) {
                    const double v = img[c * 1024 + p];
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        count += part.size() * 1024;
    }
    ChannelStats s{};
    for (std::size_t c = 0; c < 3; ++c) {
        s.mean[c] = sum[c] / static_cast<double>(count);
        s.stddev[c] = std::sqrt(sq[c] / static_cast<double>(count) - s.mean[c] * s.mean[c]);
    }
    return s;
}

}  // namespace

CifarSplits load_cifar10(const std::filesystem::path& dir, bool recompute_stats) {
    std::filesystem::path base = dir;
    if (!std::filesystem::exists(base / "data_batch_1.bin") &&
        std::filesystem::exists(dir / "cifar-10-batches-bin")) {
        base = dir / "cifar-10-batches-bin";
    }
    const ChannelStats stats = recompute_stats ? measured_stats(base) : kCifarStats;
    std::vector<ImageDataset> train_parts;
    for (int i = 1; i <= 5; ++i) {
        train_parts.push_back(read_cifar_file(base / ("data_batch_" + std::to_string(i) + ".bin"), stats));
    }
    std::vector<ImageDataset> test_parts;
    test_parts.push_back(read_cifar_file(base / "test_batch.bin", stats));
    return {concat(std::move(train_parts), "train"), concat(std::move(test_parts), "test")};
}

// ---------------------------------------------------------------------------
// Synthetic images

ImageDataset synthetic_classification(const SyntheticImageOptions& options,
                                      const std::string& split) {
    if (options.classes == 0 || options.size == 0) {
        throw ConfigError("synthetic_classification needs positive classes and size");
    }
    ImageDataset ds;
    ds.split = split;
    ds.classes = options.classes;
    const std::size_t hw = ds.height * ds.width;
    const std::size_t stride = ds.sample_size();

    std::vector<double> templates(options.classes * stride, 0.0);
    Rng trng(derive_seed(options.seed, "synthetic_classification.templates"));
    std::uniform_real_distribution<double> centre(4.0, 28.0), radius(3.0, 6.0), colour(-1.0, 1.0);
    for (std::size_t k = 0; k < options.classes; ++k) {
        double* t = templates.data() + k * stride;
        for (int blob = 0; blob < 3; ++blob) {
            const double cy = centre(trng), cx = centre(trng), r = radius(trng);
            const std::array<double, 3> rgb{colour(trng), colour(trng), colour(trng)};
            for (std::size_t y = 0; y < ds.height; ++y) {
                for (std::size_t x = 0; x < ds.width; ++x) {
                    const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
                    const double g = options.amplitude * std::exp(-(dy * dy + dx * dx) / (2 * r * r));
                    for (std::size_t c = 0; c < 3; ++c) t[c * hw + y * ds.width + x] += rgb[c] * g;
                }
            }
        }
    }

    Rng srng(derive_seed(options.seed, "synthetic_classification." + split));
    ds.labels.resize(options.size);
    for (std::size_t i = 0; i < options.size; ++i) ds.labels[i] = static_cast<std::uint8_t>(i % options.classes);
    std::shuffle(ds.labels.begin(), ds.labels.end(), srng);
    ds.images.resize(options.size * stride);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t i = 0; i < options.size; ++i) {
        const double* t = templates.data() + ds.labels[i] * stride;
        float* dst = ds.images.data() + i * stride;
        for (std::size_t p = 0; p < stride; ++p) {
            dst[p] = static_cast<float>(t[p] + options.noise * noise(srng));
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Text

std::size_t TokenCorpus::id(const std::string& token) const {
    const auto it = ids.find(token);
    return it == ids.end() ? unk : it->second;
}

bool is_valid_utf8(std::string_view text) {
    std::size_t i = 0;
    while (i < text.size()) {
        const auto c = static_cast<unsigned char>(text[i]);
        std::size_t extra;
        std::uint32_t cp;
        if (c < 0x80) {
            ++i;
            continue;
        } else if ((c & 0xE0) == 0xC0) {
            extra = 1;
            cp = c & 0x1F;
        } else if ((c & 0xF0) == 0xE0) {
            extra = 2;
            cp = c & 0x0F;
        } else if ((c & 0xF8) == 0xF0) {
            extra = 3;
            cp = c & 0x07;
        } else {
            return false;
        }
        if (i + extra >= text.size()) return false;
        for (std::size_t k = 1; k <= extra; ++k) {
            const auto cc = static_cast<unsigned char>(text[i + k]);
            if ((cc & 0xC0) != 0x80) return false;
            cp = (cp << 6) | (cc & 0x3F);
        }
        static constexpr std::uint32_t kMin[] = {0, 0x80, 0x800, 0x10000};
        if (cp < kMin[extra] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return false;
        i += extra + 1;
    }
    return true;
}

namespace {

template <typename Fn>
void for_each_line(std::string_view text, Fn&& on_line) {
    while (!text.empty()) {
        const auto eol = text.find('\n');
        on_line(text.substr(0, eol));
        if (eol == std::string_view::npos) break;
        text.remove_prefix(eol + 1);
    }
}

template <typename Fn>
void for_each_word(std::string_view line, Fn&& on_word) {
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
        const std::size_t start = i;
        while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
        if (i > start) on_word(line.substr(start, i - start));
    }
}

std::vector<std::size_t> encode(std::string_view text, const TokenCorpus& corpus) {
    std::vector<std::size_t> stream;
    for_each_line(text, [&](std::string_view line) {
        for_each_word(line, [&](std::string_view w) { stream.push_back(corpus.id(std::string(w))); });
        stream.push_back(TokenCorpus::eos);
    });
    return stream;
}

}  // namespace

TokenCorpus build_corpus(std::string_view train, std::string_view valid, std::string_view test,
                         std::size_t max_vocab) {
    for (const auto& [name, text] : {std::pair{"train", train}, {"valid", valid}, {"test", test}}) {
        if (!is_valid_utf8(text)) throw FormatError(std::string(name) + " split is not valid UTF-8");
    }
    if (max_vocab != 0 && max_vocab < 2) throw ConfigError("vocabulary cap must be at least 2");

    std::vector<std::string> order;
    std::unordered_map<std::string, std::size_t> freq;
    for_each_line(train, [&](std::string_view line) {
        for_each_word(line, [&](std::string_view w) {
            std::string word(w);
            if (word == "<unk>" || word == "<eos>") return;
            if (freq[word]++ == 0) order.push_back(std::move(word));
        });
    });

    std::vector<std::string> kept = order;
    if (max_vocab != 0 && order.size() > max_vocab - 2) {
        std::vector<std::string> ranked = order;
        std::sort(ranked.begin(), ranked.end(), [&](const std::string& a, const std::string& b) {
            const auto fa = freq.at(a), fb = freq.at(b);
            return fa != fb ? fa > fb : a < b;
        });
        ranked.resize(max_vocab - 2);
        std::unordered_map<std::string, bool> keep;
        for (const auto& w : ranked) keep[w] = true;
        kept.clear();
        for (const auto& w : order) {
            if (keep.contains(w)) kept.push_back(w);
        }
    }

    TokenCorpus corpus;
    corpus.tokens = {"<unk>", "<eos>"};
    corpus.ids = {{"<unk>", TokenCorpus::unk}, {"<eos>", TokenCorpus::eos}};
    for (auto& w : kept) {
        corpus.ids.emplace(w, corpus.tokens.size());
        corpus.tokens.push_back(w);
    }
    corpus.train = encode(train, corpus);
    corpus.valid = encode(valid, corpus);
    corpus.test = encode(test, corpus);
    return corpus;
}

TokenCorpus load_wikitext2(const std::filesystem::path& dir, std::size_t max_vocab) {
    std::array<std::string, 3> texts;
    const std::array<const char*, 3> names{"wiki.train.tokens", "wiki.valid.tokens",
                                           "wiki.test.tokens"};
    std::filesystem::path base = dir;
    if (!std::filesystem::exists(base / names[0]) && std::filesystem::exists(dir / "wikitext-2")) {
        base = dir / "wikitext-2";
    }
    for (std::size_t i = 0; i < 3; ++i) {
        const auto path = base / names[i];
        if (!std::filesystem::exists(path)) throw IoError("missing WikiText2 split " + path.string());
        texts[i] = read_file(path);
    }
    return build_corpus(texts[0], texts[1], texts[2], max_vocab);
}

// ---------------------------------------------------------------------------
// Markov source

MarkovSource::MarkovSource(std::uint64_t seed, std::size_t vocab, std::size_t fanout,
                           double bigram_weight)
    : vocab_(vocab), symbols_(vocab >= 3 ? vocab - 2 : 0) {
    if (symbols_ == 0) throw ConfigError("Markov source needs a vocabulary of at least 3");
    if (fanout == 0 || fanout > symbols_) throw ConfigError("Markov fanout out of range");
    if (bigram_weight < 0.0 || bigram_weight > 1.0) {
        throw ConfigError("Markov bigram weight must lie in [0, 1]");
    }
    const std::size_t s = symbols_;
    Rng rng(derive_seed(seed, "markov_source"));
    std::exponential_distribution<double> weight(1.0);

    std::vector<double> bigram(s * s, 0.0);
    std::vector<std::vector<std::size_t>> successors(s);
    std::vector<std::size_t> pool(s);
    for (std::size_t b = 0; b < s; ++b) {
        std::iota(pool.begin(), pool.end(), 0);
        for (std::size_t k = 0; k < fanout; ++k) {
            std::uniform_int_distribution<std::size_t> pick(k, s - 1);
            std::swap(pool[k], pool[pick(rng)]);
        }
        successors[b].assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(fanout));
        double total = 0.0;
        for (std::size_t c : successors[b]) total += bigram[b * s + c] = weight(rng);
        for (std::size_t c : successors[b]) bigram[b * s + c] /= total;
    }

    table_.assign(s * s * s, 0.0);
    std::uniform_int_distribution<std::size_t> pick(0, fanout - 1);
    for (std::size_t a = 0; a < s; ++a) {
        for (std::size_t b = 0; b < s; ++b) {
            double* row = table_.data() + (a * s + b) * s;
            for (std::size_t c = 0; c < s; ++c) row[c] = bigram_weight * bigram[b * s + c];
            row[successors[b][pick(rng)]] += 1.0 - bigram_weight;
        }
    }
}

std::span<const double> MarkovSource::distribution(std::size_t prev2, std::size_t prev1) const {
    if (prev2 < 2 || prev1 < 2 || prev2 >= vocab_ || prev1 >= vocab_) {
        throw ContractError("Markov state ids must lie in [2, vocab)");
    }
    return {table_.data() + ((prev2 - 2) * symbols_ + (prev1 - 2)) * symbols_, symbols_};
}

double MarkovSource::probability(std::size_t prev2, std::size_t prev1, std::size_t next) const {
    if (next < 2 || next >= vocab_) return 0.0;
    return distribution(prev2, prev1)[next - 2];
}

std::vector<std::size_t> MarkovSource::sample(std::size_t length, Rng& rng) const {
    std::uniform_int_distribution<std::size_t> start(2, vocab_ - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::size_t a = start(rng), b = start(rng);
    const auto step = [&] {
        const auto row = distribution(a, b);
        double u = unit(rng);
        std::size_t c = 0, last = 0;
        for (std::size_t k = 0; k < row.size(); ++k) {
            if (row[k] == 0.0) continue;
            last = k;
            if ((u -= row[k]) < 0.0) break;
        }
        c = last;
        a = b;
        b = c + 2;
        return b;
    };
    for (int i = 0; i < 1000; ++i) step();
    std::vector<std::size_t> out(length);
    for (auto& t : out) t = step();
    return out;
}

std::vector<double> MarkovSource::stationary(std::size_t max_iterations, double tol) const {
    const std::size_t s = symbols_;
    std::vector<double> pi(s * s, 1.0 / static_cast<double>(s * s)), next(s * s);
    for (std::size_t it = 0; it < max_iterations; ++it) {
        // Lazy chain: same fixed point, no periodicity.
        for (std::size_t i = 0; i < s * s; ++i) next[i] = 0.5 * pi[i];
        for (std::size_t a = 0; a < s; ++a) {
            for (std::size_t b = 0; b < s; ++b) {
                const double w = 0.5 * pi[a * s + b];
                if (w == 0.0) continue;
                const double* row = table_.data() + (a * s + b) * s;
                double* dst = next.data() + b * s;
                for (std::size_t c = 0; c < s; ++c) dst[c] += w * row[c];
            }
        }
        double diff = 0.0;
        for (std::size_t i = 0; i < s * s; ++i) diff += std::abs(next[i] - pi[i]);
        pi.swap(next);
        if (diff < tol) break;
    }
    return pi;
}

double MarkovSource::entropy_rate() const {
    const std::size_t s = symbols_;
    const auto pi = stationary();
    double h = 0.0;
    for (std::size_t state = 0; state < s * s; ++state) {
        if (pi[state] == 0.0) continue;
        const double* row = table_.data() + state * s;
        double row_h = 0.0;
        for (std::size_t c = 0; c < s; ++c) {
            if (row[c] > 0.0) row_h -= row[c] * std::log(row[c]);
        }
        h += pi[state] * row_h;
    }
    return h;
}

SyntheticLM synthetic_lm(const SyntheticLMOptions& options) {
    if (options.length == 0) throw ConfigError("synthetic_lm needs a positive length");
    const MarkovSource source(options.seed, options.vocab, options.fanout, options.bigram_weight);
    SyntheticLM out;
    auto& corpus = out.corpus;
    corpus.tokens = {"<unk>", "<eos>"};
    corpus.ids = {{"<unk>", TokenCorpus::unk}, {"<eos>", TokenCorpus::eos}};
    for (std::size_t i = 2; i < options.vocab; ++i) {
        corpus.tokens.push_back("w" + std::to_string(i));
        corpus.ids.emplace(corpus.tokens.back(), i);
    }
    const std::size_t held_out = std::max<std::size_t>(1, options.length / 10);
    Rng train_rng(derive_seed(options.seed, "synthetic_lm.train"));
    Rng valid_rng(derive_seed(options.seed, "synthetic_lm.valid"));
    Rng test_rng(derive_seed(options.seed, "synthetic_lm.test"));
    corpus.train = source.sample(options.length, train_rng);
    corpus.valid = source.sample(held_out, valid_rng);
    corpus.test = source.sample(held_out, test_rng);
    out.entropy_rate = source.entropy_rate();
    return out;
}

// ---------------------------------------------------------------------------
// Batchers

ImageBatcher::ImageBatcher(const ImageDataset& data, std::size_t batch_size, bool shuffle,
                           std::uint64_t seed, bool drop_last, bool augment)
    : data_(data),
      batch_size_(batch_size),
      shuffle_(shuffle),
      seed_(seed),
      drop_last_(drop_last),
      augment_(augment) {
    if (data.size() == 0) throw ContractError("image batcher: empty dataset");
    if (batch_size == 0 || batch_size > data.size()) {
        throw ContractError("image batcher: batch size " + std::to_string(batch_size) +
                            " exceeds dataset size " + std::to_string(data.size()));
    }
    start_epoch(0);
}

void ImageBatcher::start_epoch(std::size_t epoch) {
    epoch_ = epoch;
    if (shuffle_) {
        order_ = permutation(data_.size(), derive_seed(seed_, "images.epoch" + std::to_string(epoch)));
    } else {
        order_.resize(data_.size());
        std::iota(order_.begin(), order_.end(), 0);
    }
}

std::size_t ImageBatcher::batches() const {
    return drop_last_ ? data_.size() / batch_size_
                      : (data_.size() + batch_size_ - 1) / batch_size_;
}

ImageBatch ImageBatcher::batch(std::size_t index) const {
    if (index >= batches()) throw ContractError("image batcher: batch index out of range");
    const std::size_t begin = index * batch_size_;
    const std::size_t end = std::min(begin + batch_size_, data_.size());
    const std::size_t count = end - begin;
    const std::size_t c = data_.channels, h = data_.height, w = data_.width;
    const std::size_t stride = data_.sample_size();
    std::vector<double> values(count * stride);
    ImageBatch out;
    out.labels.resize(count);
    Rng rng(derive_seed(seed_, "augment.epoch" + std::to_string(epoch_) + ".batch" +
                                   std::to_string(index)));
    std::uniform_int_distribution<int> shift(-4, 4);
    std::bernoulli_distribution flip(0.5);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t src = order_[begin + i];
        out.labels[i] = data_.labels[src];
        const auto img = data_.image(src);
        double* dst = values.data() + i * stride;
        if (!augment_) {
            std::copy(img.begin(), img.end(), dst);
            continue;
        }
        // Zero-pad by 4, crop back to size, optional horizontal flip.
        const int dy = shift(rng), dx = shift(rng);
        const bool mirror = flip(rng);
        for (std::size_t ch = 0; ch < c; ++ch) {
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t x = 0; x < w; ++x) {
                    const long sy = static_cast<long>(y) + dy;
                    const long sxr = static_cast<long>(mirror ? w - 1 - x : x) + dx;
                    const bool inside = sy >= 0 && sy < static_cast<long>(h) && sxr >= 0 &&
                                        sxr < static_cast<long>(w);
                    dst[(ch * h + y) * w + x] =
                        inside ? img[(ch * h + static_cast<std::size_t>(sy)) * w +
                                     static_cast<std::size_t>(sxr)]
                               : 0.0;
                }
            }
        }
    }
    out.images = Tensor::from_data({count, c, h, w}, std::move(values));
    return out;
}

TokenBatcher::TokenBatcher(std::span<const std::size_t> stream, std::size_t batch_size,
                           std::size_t steps, bool shuffle, std::uint64_t seed, bool drop_last)
    : batch_size_(batch_size), steps_(steps), shuffle_(shuffle), seed_(seed) {
    if (stream.empty()) throw ContractError("token batcher: empty stream");
    if (batch_size == 0 || steps == 0) throw ContractError("token batcher: zero batch or steps");
    if (batch_size > stream.size()) {
        throw ContractError("token batcher: batch size " + std::to_string(batch_size) +
                            " exceeds stream length " + std::to_string(stream.size()));
    }
    column_length_ = stream.size() / batch_size;
    if (column_length_ < 2) throw ContractError("token batcher: stream too short to fold");
    columns_.assign(stream.begin(),
                    stream.begin() + static_cast<std::ptrdiff_t>(batch_size * column_length_));
    for (std::size_t start = 0; start + 1 < column_length_; start += steps) {
        const std::size_t len = std::min(steps, column_length_ - 1 - start);
        if (len < steps && drop_last) break;
        windows_.push_back(start);
    }
    if (windows_.empty()) throw ContractError("token batcher: stream shorter than one window");
    start_epoch(0);
}

void TokenBatcher::start_epoch(std::size_t epoch) {
    if (shuffle_) {
        order_ = permutation(windows_.size(), derive_seed(seed_, "tokens.epoch" + std::to_string(epoch)));
    } else {
        order_.resize(windows_.size());
        std::iota(order_.begin(), order_.end(), 0);
    }
}

TokenBatch TokenBatcher::batch(std::size_t index) const {
    if (index >= order_.size()) throw ContractError("token batcher: batch index out of range");
    const std::size_t start = windows_[order_[index]];
    const std::size_t len = std::min(steps_, column_length_ - 1 - start);
    TokenBatch out;
    out.batch = batch_size_;
    out.steps = len;
    out.inputs.resize(batch_size_ * len);
    out.targets.resize(batch_size_ * len);
    for (std::size_t b = 0; b < batch_size_; ++b) {
        const std::size_t* col = columns_.data() + b * column_length_;
        for (std::size_t t = 0; t < len; ++t) {
            out.inputs[b * len + t] = col[start + t];
            out.targets[b * len + t] = col[start + t + 1];
        }
    }
    return out;
}

}  // namespace phydi

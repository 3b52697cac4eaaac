#include "phydi/harness.hpp"

#include "phydi/errors.hpp"
#include "phydi/random.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace phydi {

namespace {

constexpr const char* kCodeVersion = "phydi 0.1.0";

std::mutex& output_mutex() {
    static std::mutex m;
    return m;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("failed writing " + path.string());
}

std::string format_fixed(double value, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, value);
    return buf;
}

std::vector<std::size_t> to_sizes(const std::vector<std::uint64_t>& v) {
    return {v.begin(), v.end()};
}

std::vector<std::uint64_t> to_u64(const std::vector<std::size_t>& v) {
    return {v.begin(), v.end()};
}

std::string join_strings(const std::vector<std::string>& items) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + items[i];
    return out;
}

/// Runs `count` jobs on up to `workers` threads; rethrows the first failure.
void parallel_for(std::size_t count, std::size_t workers, const std::function<void(std::size_t)>& job) {
    workers = std::max<std::size_t>(1, std::min(workers, count));
    if (workers == 1) {
        for (std::size_t i = 0; i < count; ++i) job(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < workers; ++w) {
        threads.emplace_back([&] {
            for (std::size_t i = next++; i < count; i = next++) {
                try {
                    job(i);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                }
            }
        });
    }
    for (auto& t : threads) t.join();
    if (failure) std::rethrow_exception(failure);
}

}  // namespace

std::string to_string(DatasetKind kind) {
    switch (kind) {
        case DatasetKind::cifar10: return "cifar10";
        case DatasetKind::wikitext2: return "wikitext2";
        case DatasetKind::synthetic_classification: return "synthetic_classification";
        case DatasetKind::synthetic_lm: return "synthetic_lm";
    }
    return "?";
}

DatasetKind parse_dataset(const std::string& text) {
    for (auto k : {DatasetKind::cifar10, DatasetKind::wikitext2,
                   DatasetKind::synthetic_classification, DatasetKind::synthetic_lm}) {
        if (to_string(k) == text) return k;
    }
    throw ConfigError("data.dataset: unknown dataset '" + text + "'");
}

// ---------------------------------------------------------------------------
// Configuration

ExperimentConfig ExperimentConfig::from_kv(const KeyValueConfig& kv) {
    ExperimentConfig c;
    c.model = ModelConfig::from_kv(kv);
    const bool lm = c.model.family == ModelFamily::phtransformer;

    auto& d = c.data;
    d.dataset = parse_dataset(kv.get_string(
        "data.dataset", lm ? "synthetic_lm" : "synthetic_classification"));
    const char* env_dir = std::getenv(kDataDirEnv);
    d.dir = kv.get_string("data.dir", env_dir ? env_dir : "");
    d.size = kv.get_uint("data.size", lm ? 40000 : 4000);
    d.eval_size = kv.get_uint("data.eval_size", lm ? 4000 : 1000);
    d.noise = kv.get_double("data.noise", d.noise);
    d.amplitude = kv.get_double("data.amplitude", d.amplitude);
    d.data_seed = kv.get_uint("data.seed", d.data_seed);
    d.max_vocab = kv.get_uint("data.max_vocab", d.max_vocab);
    d.fanout = kv.get_uint("data.fanout", d.fanout);
    d.bigram_weight = kv.get_double("data.bigram_weight", d.bigram_weight);
    d.augment = kv.get_bool("data.augment", d.augment);
    d.recompute_stats = kv.get_bool("data.recompute_stats", d.recompute_stats);
    d.eval_split = kv.get_string("data.eval_split", lm ? "valid" : "test");

    const bool image_data = d.dataset == DatasetKind::cifar10 ||
                            d.dataset == DatasetKind::synthetic_classification;
    if (image_data == lm) {
        throw ConfigError("data.dataset '" + to_string(d.dataset) + "' does not suit model.family '" +
                          to_string(c.model.family) + "'");
    }
    if (d.dataset == DatasetKind::wikitext2 && !kv.contains("model.vocab")) c.model.vocab = 0;

    auto& t = c.train;
    t.epochs = kv.get_uint("train.epochs", lm ? 50 : 30);
    t.batch_size = kv.get_uint("train.batch_size", 64);
    t.eval_batch_size = kv.get_uint("train.eval_batch_size", lm ? 16 : 256);
    t.optimizer = parse_optimizer(kv.get_string("train.optimizer", lm ? "adagrad" : "sgd_momentum"));
    t.lr = kv.get_double("train.lr", lm ? 0.01 : 0.1);
    t.momentum = kv.get_double("train.momentum", lm ? 0.0 : 0.9);
    t.weight_decay = kv.get_double("train.weight_decay", lm ? 0.0 : 1e-4);
    t.gamma = kv.get_double("train.gamma", lm ? 0.5 : 0.1);
    std::vector<std::uint64_t> milestones;
    if (lm) {
        for (std::uint64_t m = 10; m < t.epochs; m += 10) milestones.push_back(m);
    } else {
        milestones = {(2 * t.epochs + 2) / 3, (5 * t.epochs + 5) / 6};
    }
    t.milestones = to_sizes(kv.get_uint_list("train.milestones", milestones));
    if (!std::is_sorted(t.milestones.begin(), t.milestones.end())) {
        throw ConfigError("train.milestones must be sorted");
    }
    t.shuffle = kv.get_bool("train.shuffle", t.shuffle);
    t.augment = d.augment;
    t.inject_nan_epoch = kv.get_uint("debug.inject_nan_epoch", 0);
    c.stop_at_threshold = kv.get_bool("train.stop_at_threshold", false);

    c.thresholds.accuracy = kv.get_double("thresholds.accuracy", c.thresholds.accuracy);
    c.thresholds.perplexity = kv.get_double("thresholds.perplexity", c.thresholds.perplexity);
    c.thresholds.entropy_factor =
        kv.get_double("thresholds.entropy_factor", c.thresholds.entropy_factor);
    if (!(c.thresholds.accuracy > 0.0) || !(c.thresholds.perplexity > 0.0)) {
        throw ConfigError("thresholds must be positive");
    }

    c.seeds = kv.get_uint_list("run.seeds", c.seeds);
    if (c.seeds.empty()) throw ConfigError("run.seeds must not be empty");
    c.out_dir = kv.get_string("run.out", c.out_dir);
    c.label = kv.get_string("run.label", "");
    c.workers = kv.get_uint("run.workers", 1);
    if (c.workers == 0) throw ConfigError("run.workers must be at least 1");
    if (t.epochs == 0) throw ConfigError("train.epochs must be at least 1");
    if (t.batch_size == 0) throw ConfigError("train.batch_size must be at least 1");

    c.grid.variants = kv.get_string_list(
        "bench.variants", lm ? std::vector<std::string>{"postnorm", "prenorm", "phydi"}
                             : std::vector<std::string>{"standard", "wkp", "phydi"});
    for (const auto& v : c.grid.variants) parse_variant(v);
    c.grid.ns = kv.get_uint_list("bench.n", {c.model.n});
    c.grid.depths = kv.get_uint_list("bench.depths", {c.model.depth});
    c.grid.beat_metric = kv.get_bool("bench.beat_metric", true);

    if (c.model.vocab != 0) c.model.validate();

    const auto known = c.to_kv();
    for (const auto& [key, value] : kv.entries()) {
        if (!known.contains(key)) throw ConfigError("unknown config key '" + key + "'");
    }
    return c;
}

KeyValueConfig ExperimentConfig::to_kv() const {
    KeyValueConfig kv;
    model.to_kv(kv);
    kv.set("data.dataset", to_string(data.dataset));
    kv.set("data.dir", data.dir);
    kv.set("data.size", std::to_string(data.size));
    kv.set("data.eval_size", std::to_string(data.eval_size));
    kv.set("data.noise", format_double(data.noise));
    kv.set("data.amplitude", format_double(data.amplitude));
    kv.set("data.seed", std::to_string(data.data_seed));
    kv.set("data.max_vocab", std::to_string(data.max_vocab));
    kv.set("data.fanout", std::to_string(data.fanout));
    kv.set("data.bigram_weight", format_double(data.bigram_weight));
    kv.set("data.augment", data.augment ? "true" : "false");
    kv.set("data.recompute_stats", data.recompute_stats ? "true" : "false");
    kv.set("data.eval_split", data.eval_split);
    kv.set("train.epochs", std::to_string(train.epochs));
    kv.set("train.batch_size", std::to_string(train.batch_size));
    kv.set("train.eval_batch_size", std::to_string(train.eval_batch_size));
    kv.set("train.optimizer", to_string(train.optimizer));
    kv.set("train.lr", format_double(train.lr));
    kv.set("train.momentum", format_double(train.momentum));
    kv.set("train.weight_decay", format_double(train.weight_decay));
    kv.set("train.gamma", format_double(train.gamma));
    kv.set("train.milestones", join_list(to_u64(train.milestones)));
    kv.set("train.shuffle", train.shuffle ? "true" : "false");
    kv.set("train.stop_at_threshold", stop_at_threshold ? "true" : "false");
    kv.set("debug.inject_nan_epoch", std::to_string(train.inject_nan_epoch));
    kv.set("thresholds.accuracy", format_double(thresholds.accuracy));
    kv.set("thresholds.perplexity", format_double(thresholds.perplexity));
    kv.set("thresholds.entropy_factor", format_double(thresholds.entropy_factor));
    kv.set("run.seeds", join_list(seeds));
    kv.set("run.out", out_dir);
    kv.set("run.label", label);
    kv.set("run.workers", std::to_string(workers));
    kv.set("bench.variants", join_strings(grid.variants));
    kv.set("bench.n", join_list(grid.ns));
    kv.set("bench.depths", join_list(grid.depths));
    kv.set("bench.beat_metric", grid.beat_metric ? "true" : "false");
    return kv;
}

std::string ExperimentConfig::hash() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a(resolved_text())));
    return buf;
}

MetricKind ExperimentConfig::metric() const {
    return model.family == ModelFamily::phtransformer ? MetricKind::perplexity
                                                      : MetricKind::accuracy;
}

std::string default_label(const ModelConfig& model) {
    return to_string(model.family) + "-d" + std::to_string(model.depth) + "-n" +
           std::to_string(model.n) + "-" + to_string(model.variant);
}

std::string ExperimentConfig::run_label() const {
    return label.empty() ? default_label(model) : label;
}

ExperimentConfig load_experiment(const std::optional<std::filesystem::path>& path,
                                 const std::vector<std::string>& overrides) {
    KeyValueConfig kv = path ? KeyValueConfig::load(*path) : KeyValueConfig{};
    for (const auto& o : overrides) kv.apply_override(o);
    return ExperimentConfig::from_kv(kv);
}

// ---------------------------------------------------------------------------
// Data

PreparedData prepare_data(const ExperimentConfig& config) {
    PreparedData out;
    const auto& d = config.data;
    const auto need_dir = [&](const char* what) {
        if (d.dir.empty()) {
            throw ConfigError(std::string("data.dir (or ") + kDataDirEnv + ") must name the " +
                              what + " directory");
        }
        return std::filesystem::path(d.dir);
    };
    switch (d.dataset) {
        case DatasetKind::cifar10: {
            if (config.model.classes != 10 || config.model.in_channels != 3) {
                throw ConfigError("CIFAR-10 needs model.classes = 10 and model.in_channels = 3");
            }
            auto splits = load_cifar10(need_dir("CIFAR-10"), d.recompute_stats);
            if (d.eval_split != "test") throw ConfigError("data.eval_split must be test for cifar10");
            out.train_images = std::move(splits.train);
            out.eval_images = std::move(splits.test);
            break;
        }
        case DatasetKind::synthetic_classification: {
            if (config.model.in_channels != 3) {
                throw ConfigError("synthetic_classification renders 3-channel images");
            }
            SyntheticImageOptions o;
            o.seed = d.data_seed;
            o.classes = config.model.classes;
            o.size = d.size;
            o.noise = d.noise;
            o.amplitude = d.amplitude;
            out.train_images = synthetic_classification(o, "train");
            o.size = d.eval_size;
            out.eval_images = synthetic_classification(o, d.eval_split);
            break;
        }
        case DatasetKind::wikitext2: {
            out.corpus = load_wikitext2(need_dir("WikiText2"), d.max_vocab);
            break;
        }
        case DatasetKind::synthetic_lm: {
            SyntheticLMOptions o;
            o.seed = d.data_seed;
            o.vocab = config.model.vocab;
            o.length = d.size;
            o.fanout = d.fanout;
            o.bigram_weight = d.bigram_weight;
            auto lm = synthetic_lm(o);
            out.corpus = std::move(lm.corpus);
            out.entropy_rate = lm.entropy_rate;
            break;
        }
    }
    if (out.corpus) {
        if (d.eval_split == "valid") {
            out.eval_stream = out.corpus->valid;
        } else if (d.eval_split == "test") {
            out.eval_stream = out.corpus->test;
        } else {
            throw ConfigError("data.eval_split must be valid or test");
        }
        if (config.model.vocab != 0 && config.model.vocab != out.corpus->vocab_size()) {
            throw ConfigError("model.vocab = " + std::to_string(config.model.vocab) +
                              " but the corpus has " + std::to_string(out.corpus->vocab_size()) +
                              " tokens");
        }
        out.threshold = config.thresholds.perplexity;
        if (config.thresholds.entropy_factor > 0.0 && out.entropy_rate) {
            out.threshold = config.thresholds.entropy_factor * std::exp(*out.entropy_rate);
        }
    } else {
        out.threshold = config.thresholds.accuracy;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training commands

SeedResult run_seed(const ExperimentConfig& config, const PreparedData& data, std::uint64_t seed,
                    std::ostream* progress) {
    ModelConfig model_cfg = config.model;
    model_cfg.init_seed = seed;
    if (data.corpus && model_cfg.vocab == 0) model_cfg.vocab = data.corpus->vocab_size();

    TrainSettings settings = config.train;
    settings.seed = seed;
    if (config.stop_at_threshold) settings.stop_threshold = data.threshold;

    const std::string label = config.run_label();
    const auto on_epoch = [&](const EpochEntry& e) {
        if (!progress) return;
        std::lock_guard lock(output_mutex());
        *progress << label << " seed " << seed << " epoch " << e.epoch << " loss "
                  << format_fixed(e.train_loss, 4) << " " << to_string(config.metric()) << " "
                  << format_fixed(e.eval_metric, 4) << " lr " << format_double(e.lr)
                  << (e.diverged ? " diverged" : "") << "\n";
        progress->flush();
    };

    SeedResult result;
    result.seed = seed;
    std::unique_ptr<Model> model;
    if (model_cfg.family == ModelFamily::phresnet) {
        auto net = build_phresnet(model_cfg);
        result.record = train_classifier(*net, *data.train_images, *data.eval_images, settings, on_epoch);
        if (net->padded_in_channels() != model_cfg.in_channels) {
            result.record.notes.push_back("input channels zero-padded from " +
                                          std::to_string(model_cfg.in_channels) + " to " +
                                          std::to_string(net->padded_in_channels()));
        }
        model = std::move(net);
    } else {
        auto net = build_phtransformer(model_cfg);
        result.record = train_language_model(*net, data.corpus->train, data.eval_stream, settings,
                                             on_epoch);
        model = std::move(net);
    }
    result.record.config_text = config.resolved_text();
    result.record.seed = seed;
    result.record.code_version = kCodeVersion;
    result.record.notes.push_back("threshold " + format_double(data.threshold));
    if (data.entropy_rate) {
        result.record.notes.push_back("source entropy rate " + format_double(*data.entropy_rate));
    }

    const auto dir = std::filesystem::path(config.out_dir) / label;
    std::filesystem::create_directories(dir);
    const std::string stem = "seed" + std::to_string(seed);
    result.csv = dir / (stem + ".csv");
    result.checkpoint = dir / (stem + ".ckpt");
    std::ostringstream csv, log;
    write_run_csv(result.record, csv);
    write_run_log(result.record, log);
    write_text(result.csv, csv.str());
    write_text(dir / (stem + ".log.jsonl"), log.str());
    save_checkpoint(*model, result.checkpoint);
    return result;
}

std::vector<SeedResult> cmd_train(const ExperimentConfig& config, std::ostream& out) {
    const PreparedData data = prepare_data(config);
    const auto dir = std::filesystem::path(config.out_dir) / config.run_label();
    std::filesystem::create_directories(dir);
    write_text(dir / "config.resolved", config.resolved_text());

    std::vector<SeedResult> results(config.seeds.size());
    parallel_for(config.seeds.size(), config.workers, [&](std::size_t i) {
        results[i] = run_seed(config, data, config.seeds[i], &out);
    });
    for (const auto& r : results) {
        std::lock_guard lock(output_mutex());
        out << "wrote " << r.csv.string() << (r.record.diverged() ? " (diverged)" : "") << "\n";
    }
    return results;
}

// ---------------------------------------------------------------------------
// Bench

ExperimentConfig bench_cell(const ExperimentConfig& base, const std::string& variant,
                            std::size_t n, std::size_t depth) {
    ExperimentConfig cell = base;
    cell.model.variant = parse_variant(variant);
    cell.model.n = n;
    if (!base.model.blocks.empty() && depth != base.model.depth) {
        throw ConfigError("bench.depths cannot vary model.depth when model.blocks is explicit");
    }
    cell.model.depth = depth;
    cell.label = default_label(cell.model);
    cell.grid = {};
    if (cell.model.vocab != 0) cell.model.validate();
    return cell;
}

namespace {

struct CellKey {
    std::size_t depth;
    std::size_t n;
    std::string variant;
};

std::vector<CellKey> grid_cells(const ExperimentConfig& config) {
    const auto& g = config.grid;
    if (g.variants.empty() || g.ns.empty() || g.depths.empty()) {
        throw ConfigError("bench grid needs bench.variants, bench.n and bench.depths");
    }
    if (g.beat_metric &&
        std::find(g.variants.begin(), g.variants.end(), "phydi") == g.variants.end()) {
        throw ConfigError("bench.beat_metric needs the phydi counterpart in bench.variants");
    }
    std::vector<CellKey> cells;
    for (auto depth : g.depths) {
        for (auto n : g.ns) {
            for (const auto& v : g.variants) cells.push_back({depth, n, v});
        }
    }
    return cells;
}

std::string model_label(const ExperimentConfig& cell) {
    return (cell.model.family == ModelFamily::phresnet ? "PHResNet" : "PHTransformer") +
           std::to_string(cell.model.depth);
}

double summary_threshold(const ExperimentConfig& config) {
    if (config.metric() == MetricKind::accuracy) return config.thresholds.accuracy;
    if (config.thresholds.entropy_factor > 0.0 && config.data.dataset == DatasetKind::synthetic_lm) {
        const MarkovSource source(config.data.data_seed, config.model.vocab, config.data.fanout,
                                  config.data.bigram_weight);
        return config.thresholds.entropy_factor * std::exp(source.entropy_rate());
    }
    return config.thresholds.perplexity;
}

std::string format_median(std::vector<double> values) {
    std::sort(values.begin(), values.end());
    const std::size_t k = values.size();
    const double median = k % 2 ? values[k / 2] : 0.5 * (values[k / 2 - 1] + values[k / 2]);
    return median == std::floor(median) ? format_fixed(median, 0) : format_fixed(median, 1);
}

std::string csv_number(const std::optional<double>& v) {
    return v ? format_double(*v) : "";
}

}  // namespace

std::vector<SummaryRow> summarize_bench(const ExperimentConfig& config) {
    const auto cells = grid_cells(config);
    const MetricKind metric = config.metric();
    const double threshold = summary_threshold(config);
    const auto out_dir = std::filesystem::path(config.out_dir);

    const auto load = [&](const ExperimentConfig& cell) {
        std::vector<RunRecord> records;
        for (auto seed : config.seeds) {
            const auto path = out_dir / cell.run_label() / ("seed" + std::to_string(seed) + ".csv");
            std::ifstream in(path, std::ios::binary);
            if (!in) throw IoError("missing run CSV " + path.string());
            records.push_back(read_run_csv(in, metric));
            records.back().seed = seed;
        }
        return records;
    };

    std::vector<SummaryRow> rows;
    std::ostringstream long_csv;
    long_csv << kPerDepthHeader << "\n";
    for (const auto& key : cells) {
        const auto cell = bench_cell(config, key.variant, key.n, key.depth);
        const auto records = load(cell);
        SummaryRow row;
        row.model = model_label(cell);
        row.n = key.n;
        row.variant = key.variant;
        row.seeds = records.size();
        row.config_hash = cell.hash();

        std::vector<double> reached;
        for (const auto& r : records) {
            const auto e = epochs_to_threshold(r, metric, threshold);
            if (r.diverged()) {
                ++row.diverged;
            } else if (!e) {
                ++row.unreached;
            }
            if (e) reached.push_back(static_cast<double>(*e));
            long_csv << to_string(cell.model.family) << "," << key.depth << "," << key.n << ","
                     << key.variant << "," << r.seed << "," << (e ? std::to_string(*e) : "") << ","
                     << (r.diverged() ? "true" : "false") << "," << csv_number(r.best_metric())
                     << "," << format_double(r.entries.back().eval_metric) << "\n";
        }
        if (records.size() >= 2) {
            const auto agg = aggregate_runs(records, metric, threshold);
            row.m1 = agg ? agg->format() : reached.empty() ? "diverged" : format_fixed(reached[0], 2);
        } else {
            row.m1 = reached.empty() ? "diverged" : format_fixed(reached[0], 2);
        }

        if (key.variant == "phydi" || !config.grid.beat_metric) {
            row.m2 = "-";
        } else {
            const auto counterpart = load(bench_cell(config, "phydi", key.n, key.depth));
            std::vector<double> beats;
            for (std::size_t i = 0; i < records.size(); ++i) {
                if (const auto e = epochs_to_beat(records[i], counterpart[i])) {
                    beats.push_back(static_cast<double>(*e));
                }
            }
            row.m2 = beats.empty() ? "never" : format_median(beats);
        }
        rows.push_back(row);
    }

    std::ostringstream summary;
    summary << kSummaryHeader << "\n";
    for (const auto& r : rows) {
        summary << r.model << "," << r.n << "," << r.variant << "," << r.m1 << "," << r.m2 << ","
                << r.diverged << "," << r.unreached << "," << r.seeds << "," << r.config_hash
                << "\n";
    }
    std::filesystem::create_directories(out_dir);
    write_text(out_dir / "summary.csv", summary.str());
    write_text(out_dir / "per_depth.csv", long_csv.str());
    return rows;
}

std::vector<SummaryRow> cmd_bench(const ExperimentConfig& config, std::ostream& out) {
    const auto cells = grid_cells(config);
    const PreparedData data = prepare_data(config);

    struct Job {
        ExperimentConfig cell;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (const auto& key : cells) {
        auto cell = bench_cell(config, key.variant, key.n, key.depth);
        const auto dir = std::filesystem::path(cell.out_dir) / cell.run_label();
        std::filesystem::create_directories(dir);
        write_text(dir / "config.resolved", cell.resolved_text());
        for (auto seed : config.seeds) jobs.push_back({cell, seed});
    }
    parallel_for(jobs.size(), config.workers,
                 [&](std::size_t i) { run_seed(jobs[i].cell, data, jobs[i].seed, &out); });

    auto rows = summarize_bench(config);
    std::lock_guard lock(output_mutex());
    out << kSummaryHeader << "\n";
    for (const auto& r : rows) {
        out << r.model << "," << r.n << "," << r.variant << "," << r.m1 << "," << r.m2 << ","
            << r.diverged << "," << r.unreached << "," << r.seeds << "," << r.config_hash << "\n";
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Gradcheck and inspect

namespace {

bool in_scope(const std::string& name, const std::string& scope) {
    if (scope == "all") return true;
    const std::string layer = name.substr(0, name.find(':'));
    return layer == scope || layer.starts_with(scope + "_");
}

std::string format_gate(double v) {
    std::string s = format_double(v);
    if (s.find_first_of(".en") == std::string::npos) s += ".0";
    return s;
}

}  // namespace

int cmd_gradcheck(const std::vector<GradcheckCase>& cases, const std::string& scope,
                  std::ostream& out, double tolerance) {
    std::size_t matched = 0, failed = 0;
    for (const auto& c : cases) {
        if (!in_scope(c.name, scope)) continue;
        ++matched;
        const double err = c.run();
        const bool ok = err < tolerance;
        if (!ok) ++failed;
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.3e", err);
        out << std::left << std::setw(40) << c.name << " max_rel_err " << buf
            << (ok ? "  ok" : "  FAIL") << "\n";
    }
    if (matched == 0) throw ConfigError("gradcheck: unknown layer '" + scope + "'");
    out << matched - failed << "/" << matched << " checks within " << tolerance << "\n";
    return failed == 0 ? 0 : 1;
}

void cmd_inspect(const std::filesystem::path& checkpoint, std::ostream& out) {
    const auto model = load_checkpoint(checkpoint);
    KeyValueConfig kv;
    model->config().to_kv(kv);
    out << "[config]\n" << kv.to_text();
    const auto count = model->param_count();
    const auto [num, den] = count.ratio();
    out << "[parameters]\n";
    out << "ph_params = " << count.ph_params << "\n";
    out << "dense_equivalent = " << count.dense_equivalent << "\n";
    out << "ratio = " << num << "/" << den << " (" << format_fixed(count.ratio_value(), 6) << ")\n";
    out << "[gates]\n";
    const auto gates = model->gate_values();
    if (gates.empty()) out << "(none)\n";
    for (const auto& g : gates) out << g.name << " = " << format_gate(g.value) << "\n";
}

}  // namespace phydi

#include "phydi/training.hpp"

#include "phydi/errors.hpp"
#include "phydi/ops.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

namespace phydi {

std::string to_string(OptimizerKind kind) {
    return kind == OptimizerKind::sgd_momentum ? "sgd_momentum" : "adagrad";
}

OptimizerKind parse_optimizer(const std::string& text) {
    if (text == "sgd_momentum" || text == "sgd") return OptimizerKind::sgd_momentum;
    if (text == "adagrad") return OptimizerKind::adagrad;
    throw ConfigError("train.optimizer: unknown optimizer '" + text + "'");
}

OptimizerState OptimizerState::create(OptimizerKind kind, double lr, double momentum,
                                      double weight_decay, const ParameterRegistry& registry) {
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    OptimizerState s;
    s.kind = kind;
    s.lr = lr;
    s.momentum = momentum;
    s.weight_decay = weight_decay;
    for (const auto& e : registry.entries()) s.accumulators.emplace_back(e.tensor.numel(), 0.0);
    return s;
}

namespace {

template <typename Update>
void apply_update(OptimizerState& state, ParameterRegistry& registry, Update&& update) {
    auto& entries = registry.entries();
    if (state.accumulators.size() != entries.size()) {
        throw ContractError("optimizer state does not match the parameter registry");
    }
    for (const auto& e : entries) {
        if (!e.tensor.has_grad()) throw ContractError("parameter " + e.name + " has no gradient");
    }
    for (std::size_t i = 0; i < entries.size(); ++i) {
        Tensor t = entries[i].tensor;
        auto& acc = state.accumulators[i];
        if (acc.size() != t.numel()) {
            throw ContractError("optimizer buffer for " + entries[i].name + " has the wrong size");
        }
        const auto grad = t.grad();
        const auto theta = t.mutable_data();
        for (std::size_t k = 0; k < theta.size(); ++k) update(theta[k], grad[k], acc[k]);
        t.zero_grad();
    }
}

}  // namespace

void sgd_step(OptimizerState& state, ParameterRegistry& registry) {
    const double lr = state.lr, m = state.momentum, wd = state.weight_decay;
    apply_update(state, registry, [&](double& theta, double g, double& v) {
        v = m * v + g + wd * theta;
        theta -= lr * v;
    });
}

void adagrad_step(OptimizerState& state, ParameterRegistry& registry) {
    const double lr = state.lr, wd = state.weight_decay;
    apply_update(state, registry, [&](double& theta, double g, double& sum_sq) {
        g += wd * theta;
        sum_sq += g * g;
        theta -= lr * g / (std::sqrt(sum_sq) + 1e-10);
    });
}

void optimizer_step(OptimizerState& state, ParameterRegistry& registry) {
    if (state.kind == OptimizerKind::sgd_momentum) {
        sgd_step(state, registry);
    } else {
        adagrad_step(state, registry);
    }
}

double step_lr(std::size_t epoch, double base_lr, std::span<const std::size_t> milestones,
               double gamma) {
    const auto passed = std::count_if(milestones.begin(), milestones.end(),
                                      [&](std::size_t m) { return m <= epoch; });
    return base_lr * std::pow(gamma, static_cast<double>(passed));
}

double perplexity(double mean_ce) { return std::exp(mean_ce); }

// ---------------------------------------------------------------------------
// Records

std::string to_string(MetricKind kind) {
    return kind == MetricKind::accuracy ? "accuracy" : "perplexity";
}

MetricKind parse_metric(const std::string& text) {
    if (text == "accuracy") return MetricKind::accuracy;
    if (text == "perplexity") return MetricKind::perplexity;
    throw ConfigError("unknown metric '" + text + "'");
}

void RunRecord::append(const EpochEntry& entry) {
    if (!entries.empty()) {
        if (entries.back().diverged) throw ContractError("run already diverged");
        if (entry.epoch <= entries.back().epoch) throw ContractError("epochs must increase");
    }
    entries.push_back(entry);
}

std::optional<double> RunRecord::best_metric() const {
    std::optional<double> best;
    for (const auto& e : entries) {
        if (e.diverged || !std::isfinite(e.eval_metric)) continue;
        if (!best || strictly_better(metric, e.eval_metric, *best)) best = e.eval_metric;
    }
    return best;
}

void write_run_csv(const RunRecord& record, std::ostream& out) {
    out << kRunCsvHeader << "\n";
    for (const auto& e : record.entries) {
        out << e.epoch << "," << format_double(e.train_loss) << "," << format_double(e.eval_metric)
            << "," << format_double(e.lr) << "," << format_double(e.wall_seconds) << ","
            << (e.diverged ? "true" : "false") << "\n";
    }
}

namespace {

double parse_csv_double(const std::string& text) {
    if (text == "nan" || text == "-nan") return std::numeric_limits<double>::quiet_NaN();
    if (text == "inf") return std::numeric_limits<double>::infinity();
    if (text == "-inf") return -std::numeric_limits<double>::infinity();
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size()) throw FormatError("bad number '" + text + "' in run CSV");
    return v;
}

}  // namespace

RunRecord read_run_csv(std::istream& in, MetricKind metric) {
    RunRecord record;
    record.metric = metric;
    std::string line;
    if (!std::getline(in, line) || line != kRunCsvHeader) {
        throw FormatError("run CSV header must be '" + std::string(kRunCsvHeader) + "'");
    }
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
        if (cells.size() != 6) throw FormatError("run CSV row needs 6 cells: " + line);
        try {
            EpochEntry e;
            e.epoch = std::stoul(cells[0]);
            e.train_loss = parse_csv_double(cells[1]);
            e.eval_metric = parse_csv_double(cells[2]);
            e.lr = parse_csv_double(cells[3]);
            e.wall_seconds = parse_csv_double(cells[4]);
            e.diverged = cells[5] == "true";
            record.append(e);
        } catch (const std::logic_error&) {
            throw FormatError("malformed run CSV row: " + line);
        }
    }
    return record;
}

void write_run_log(const RunRecord& record, std::ostream& out) {
    const auto number = [](double v) -> nlohmann::json {
        if (std::isfinite(v)) return v;
        return format_double(v);
    };
    nlohmann::json meta{{"type", "run"},
                        {"metric", to_string(record.metric)},
                        {"seed", record.seed},
                        {"code_version", record.code_version},
                        {"notes", record.notes},
                        {"config", record.config_text}};
    out << meta.dump() << "\n";
    for (const auto& e : record.entries) {
        nlohmann::json row{{"type", "epoch"},
                           {"epoch", e.epoch},
                           {"train_loss", number(e.train_loss)},
                           {"eval_metric", number(e.eval_metric)},
                           {"lr", e.lr},
                           {"wall_seconds", e.wall_seconds},
                           {"diverged", e.diverged}};
        out << row.dump() << "\n";
    }
}

bool meets_threshold(MetricKind metric, double value, double threshold) {
    if (!std::isfinite(value)) return false;
    return metric == MetricKind::accuracy ? value >= threshold : value <= threshold;
}

bool strictly_better(MetricKind metric, double a, double b) {
    return metric == MetricKind::accuracy ? a > b : a < b;
}

std::optional<std::size_t> epochs_to_threshold(const RunRecord& record, MetricKind metric,
                                               double threshold) {
    if (record.entries.empty()) throw ContractError("epochs_to_threshold: empty record");
    for (const auto& e : record.entries) {
        if (!e.diverged && meets_threshold(metric, e.eval_metric, threshold)) return e.epoch;
    }
    return std::nullopt;
}

std::optional<std::size_t> epochs_to_beat(const RunRecord& baseline, const RunRecord& phydi) {
    if (baseline.metric != phydi.metric) {
        throw ContractError("epochs_to_beat: runs use different metrics");
    }
    const auto best = baseline.best_metric();
    for (const auto& e : phydi.entries) {
        if (e.diverged || !std::isfinite(e.eval_metric)) continue;
        if (!best || strictly_better(phydi.metric, e.eval_metric, *best)) return e.epoch;
    }
    return std::nullopt;
}

std::string Aggregate::format(int decimals) const {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%.*f ± %.*f", decimals, mean, decimals, standard_error);
    return buf;
}

Aggregate aggregate_values(std::span<const double> values) {
    if (values.size() < 2) throw ContractError("aggregate needs at least two values");
    const double k = static_cast<double>(values.size());
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= k;
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    const double s = std::sqrt(ss / (k - 1.0));
    return {mean, s / std::sqrt(k), values.size()};
}

std::optional<Aggregate> aggregate_runs(std::span<const RunRecord> records, MetricKind metric,
                                        double threshold) {
    if (records.size() < 2) throw ContractError("aggregate_runs needs at least two records");
    std::vector<double> values;
    for (const auto& r : records) {
        if (const auto e = epochs_to_threshold(r, metric, threshold)) {
            values.push_back(static_cast<double>(*e));
        }
    }
    if (values.size() < 2) return std::nullopt;
    return aggregate_values(values);
}

// ---------------------------------------------------------------------------
// Loops

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
    const std::size_t rows = logits.dim(0), cols = logits.dim(1);
    const auto v = logits.data();
    std::vector<std::size_t> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const auto row = v.subspan(r * cols, cols);
        out[r] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
}

struct EpochDriver {
    const TrainSettings& settings;
    MetricKind metric;
    ParameterRegistry& registry;
    const EpochCallback& on_epoch;

    template <typename StepFn, typename EvalFn>
    RunRecord run(std::size_t batches_per_epoch, StepFn&& train_batch, EvalFn&& evaluate) {
        RunRecord record;
        record.metric = metric;
        record.seed = settings.seed;
        auto state = OptimizerState::create(settings.optimizer, settings.lr, settings.momentum,
                                            settings.weight_decay, registry);
        const auto start = Clock::now();
        for (std::size_t epoch = 1; epoch <= settings.epochs; ++epoch) {
            state.lr = step_lr(epoch - 1, settings.lr, settings.milestones, settings.gamma);
            double loss_sum = 0.0;
            bool diverged = false;
            for (std::size_t b = 0; b < batches_per_epoch; ++b) {
                double loss = train_batch(epoch, b);
                if (epoch == settings.inject_nan_epoch && b == 0) {
                    loss = std::numeric_limits<double>::quiet_NaN();
                }
                if (!std::isfinite(loss)) {
                    diverged = true;
                    loss_sum = loss;
                    registry.zero_grad();
                    break;
                }
                loss_sum += loss;
                optimizer_step(state, registry);
            }
            EpochEntry entry;
            entry.epoch = epoch;
            entry.lr = state.lr;
            if (diverged) {
                entry.train_loss = loss_sum;
                entry.eval_metric = std::numeric_limits<double>::quiet_NaN();
            } else {
                entry.train_loss = loss_sum / static_cast<double>(batches_per_epoch);
                entry.eval_metric = evaluate();
                diverged = !std::isfinite(entry.eval_metric);
            }
            entry.diverged = diverged;
            entry.wall_seconds = seconds_since(start);
            record.append(entry);
            if (on_epoch) on_epoch(entry);
            if (diverged) break;
            if (settings.stop_threshold &&
                meets_threshold(metric, entry.eval_metric, *settings.stop_threshold)) {
                break;
            }
        }
        return record;
    }
};

}  // namespace

double evaluate_accuracy(const PHResNet& model, const ImageDataset& data, std::size_t batch_size) {
    NoGradGuard no_grad;
    ImageBatcher batcher(data, std::min(batch_size, data.size()), false, 0, false);
    std::size_t correct = 0;
    for (std::size_t b = 0; b < batcher.batches(); ++b) {
        const auto batch = batcher.batch(b);
        const auto predicted = argmax_rows(model.forward(batch.images));
        for (std::size_t i = 0; i < predicted.size(); ++i) correct += predicted[i] == batch.labels[i];
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

double evaluate_perplexity(const PHTransformer& model, std::span<const std::size_t> stream,
                           std::size_t batch_size, std::size_t steps) {
    NoGradGuard no_grad;
    TokenBatcher batcher(stream, batch_size, steps, false, 0, false);
    double total = 0.0;
    std::size_t tokens = 0;
    for (std::size_t b = 0; b < batcher.batches(); ++b) {
        const auto batch = batcher.batch(b);
        const Tensor logits = model.forward(batch.inputs, batch.batch, batch.steps);
        const double ce = cross_entropy(logits, batch.targets).item();
        total += ce * static_cast<double>(batch.targets.size());
        tokens += batch.targets.size();
    }
    return perplexity(total / static_cast<double>(tokens));
}

RunRecord train_classifier(PHResNet& model, const ImageDataset& train, const ImageDataset& eval,
                           const TrainSettings& settings, const EpochCallback& on_epoch) {
    ImageBatcher batcher(train, settings.batch_size, settings.shuffle,
                         derive_seed(settings.seed, "train_batches"), true, settings.augment);
    EpochDriver driver{settings, MetricKind::accuracy, model.parameters(), on_epoch};
    return driver.run(
        batcher.batches(),
        [&](std::size_t epoch, std::size_t b) {
            if (b == 0) batcher.start_epoch(epoch);
            const auto batch = batcher.batch(b);
            const Tensor loss = cross_entropy(model.forward(batch.images), batch.labels);
            loss.backward();
            return loss.item();
        },
        [&] { return evaluate_accuracy(model, eval, settings.eval_batch_size); });
}

RunRecord train_language_model(PHTransformer& model, std::span<const std::size_t> train,
                               std::span<const std::size_t> eval, const TrainSettings& settings,
                               const EpochCallback& on_epoch) {
    const std::size_t steps = model.config().seq_len;
    TokenBatcher batcher(train, settings.batch_size, steps, settings.shuffle,
                         derive_seed(settings.seed, "train_batches"), true);
    EpochDriver driver{settings, MetricKind::perplexity, model.parameters(), on_epoch};
    return driver.run(
        batcher.batches(),
        [&](std::size_t epoch, std::size_t b) {
            if (b == 0) batcher.start_epoch(epoch);
            const auto batch = batcher.batch(b);
            const Tensor loss =
                cross_entropy(model.forward(batch.inputs, batch.batch, batch.steps), batch.targets);
            loss.backward();
            return loss.item();
        },
        [&] {
            const std::size_t eval_batch = std::min(settings.eval_batch_size, eval.size() / 2);
            return evaluate_perplexity(model, eval, std::max<std::size_t>(eval_batch, 1), steps);
        });
}

}  // namespace phydi

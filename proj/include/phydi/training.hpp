#pragma once

#include "phydi/data.hpp"
#include "phydi/layers.hpp"
#include "phydi/models.hpp"

#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace phydi {

// ---------------------------------------------------------------------------
// Optimisers

enum class OptimizerKind { sgd_momentum, adagrad };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& text);

struct OptimizerState {
    OptimizerKind kind = OptimizerKind::sgd_momentum;
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 0.0;
    /// One buffer per registry entry: velocity (sgd) or squared-gradient sum (adagrad).
    std::vector<std::vector<double>> accumulators;

    static OptimizerState create(OptimizerKind kind, double lr, double momentum,
                                 double weight_decay, const ParameterRegistry& registry);
};

/// v = m v + g + wd theta;  theta -= lr v.  Clears gradients afterwards.
void sgd_step(OptimizerState& state, ParameterRegistry& registry);
/// G += g^2;  theta -= lr g / (sqrt(G) + 1e-10).  Clears gradients afterwards.
void adagrad_step(OptimizerState& state, ParameterRegistry& registry);
void optimizer_step(OptimizerState& state, ParameterRegistry& registry);

/// base_lr * gamma^(number of milestones <= epoch).
double step_lr(std::size_t epoch, double base_lr, std::span<const std::size_t> milestones,
               double gamma);

double perplexity(double mean_ce);

// ---------------------------------------------------------------------------
// Run records and convergence metrics

enum class MetricKind { accuracy, perplexity };

std::string to_string(MetricKind kind);
MetricKind parse_metric(const std::string& text);

struct EpochEntry {
    std::size_t epoch = 0;  ///< 1-based
    double train_loss = 0.0;
    double eval_metric = 0.0;
    double lr = 0.0;
    double wall_seconds = 0.0;
    bool diverged = false;
};

struct RunRecord {
    MetricKind metric = MetricKind::accuracy;
    std::vector<EpochEntry> entries;
    std::string config_text;
    std::uint64_t seed = 0;
    std::string code_version;
    std::vector<std::string> notes;

    /// Enforces strictly increasing epochs and nothing after a diverged entry.
    void append(const EpochEntry& entry);
    bool diverged() const { return !entries.empty() && entries.back().diverged; }
    std::optional<double> best_metric() const;
};

inline constexpr const char* kRunCsvHeader = "epoch,train_loss,eval_metric,lr,wall_seconds,diverged";

void write_run_csv(const RunRecord& record, std::ostream& out);
RunRecord read_run_csv(std::istream& in, MetricKind metric);
/// One JSON object per epoch, preceded by a metadata object.
void write_run_log(const RunRecord& record, std::ostream& out);

/// True when `value` is at least as good as `threshold` for the metric.
bool meets_threshold(MetricKind metric, double value, double threshold);
/// True when `a` is strictly better than `b`.
bool strictly_better(MetricKind metric, double a, double b);

/// First (1-based) epoch whose eval metric reaches the threshold.
std::optional<std::size_t> epochs_to_threshold(const RunRecord& record, MetricKind metric,
                                               double threshold);

/// First epoch at which the PHYDI run's eval metric strictly beats the
/// baseline's best-ever eval metric.
std::optional<std::size_t> epochs_to_beat(const RunRecord& baseline, const RunRecord& phydi);

struct Aggregate {
    double mean = 0.0;
    double standard_error = 0.0;
    std::size_t count = 0;

    /// "mean ± stderr" with a fixed number of decimals.
    std::string format(int decimals = 2) const;
};

/// Mean and s / sqrt(k) with s the sample standard deviation; k >= 2.
Aggregate aggregate_values(std::span<const double> values);

/// Aggregates epochs_to_threshold over runs. Needs at least two records;
/// runs that never reach the threshold are left out, and the result is
/// absent when fewer than two remain.
std::optional<Aggregate> aggregate_runs(std::span<const RunRecord> records, MetricKind metric,
                                        double threshold);

// ---------------------------------------------------------------------------
// Training loops

struct TrainSettings {
    std::size_t epochs = 10;
    std::size_t batch_size = 64;
    std::size_t eval_batch_size = 256;
    OptimizerKind optimizer = OptimizerKind::sgd_momentum;
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::vector<std::size_t> milestones;
    double gamma = 0.1;
    std::uint64_t seed = 0;
    bool shuffle = true;
    bool augment = false;
    /// Stop once the eval metric reaches this value.
    std::optional<double> stop_threshold;
    /// 1-based epoch whose first batch loss is replaced by NaN; 0: off.
    std::size_t inject_nan_epoch = 0;
};

using EpochCallback = std::function<void(const EpochEntry&)>;

double evaluate_accuracy(const PHResNet& model, const ImageDataset& data, std::size_t batch_size);

/// exp of the mean token cross-entropy over the stream.
double evaluate_perplexity(const PHTransformer& model, std::span<const std::size_t> stream,
                           std::size_t batch_size, std::size_t steps);

RunRecord train_classifier(PHResNet& model, const ImageDataset& train, const ImageDataset& eval,
                           const TrainSettings& settings, const EpochCallback& on_epoch = {});

RunRecord train_language_model(PHTransformer& model, std::span<const std::size_t> train,
                               std::span<const std::size_t> eval, const TrainSettings& settings,
                               const EpochCallback& on_epoch = {});

}  // namespace phydi

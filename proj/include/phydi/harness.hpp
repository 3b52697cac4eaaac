#pragma once

#include "phydi/kv_config.hpp"
#include "phydi/models.hpp"
#include "phydi/training.hpp"

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace phydi {

enum class DatasetKind { cifar10, wikitext2, synthetic_classification, synthetic_lm };

std::string to_string(DatasetKind kind);
DatasetKind parse_dataset(const std::string& text);

/// Environment variable naming the default data directory.
inline constexpr const char* kDataDirEnv = "PHYDI_DATA_DIR";

struct DataSettings {
    DatasetKind dataset = DatasetKind::synthetic_classification;
    std::string dir;           ///< required for cifar10 and wikitext2
    std::size_t size = 4000;   ///< synthetic train samples or tokens
    std::size_t eval_size = 1000;
    double noise = 0.5;
    double amplitude = 1.0;
    std::uint64_t data_seed = 0;
    std::size_t max_vocab = 0;
    std::size_t fanout = 4;
    double bigram_weight = 0.7;
    bool augment = false;
    bool recompute_stats = false;
    std::string eval_split;    ///< test (images) or valid (text) by default
};

struct Thresholds {
    double accuracy = 0.8;
    double perplexity = 200.0;
    /// When positive with synthetic_lm, the perplexity threshold becomes
    /// this multiple of the source's entropy-rate perplexity.
    double entropy_factor = 0.0;
};

struct BenchGrid {
    std::vector<std::string> variants;
    std::vector<std::uint64_t> ns;
    std::vector<std::uint64_t> depths;
    bool beat_metric = true;  ///< compute epochs-to-beat against the phydi cell
};

struct ExperimentConfig {
    ModelConfig model;
    DataSettings data;
    TrainSettings train;
    Thresholds thresholds;
    bool stop_at_threshold = false;
    std::vector<std::uint64_t> seeds{0};
    std::string out_dir = "runs";
    std::string label;  ///< empty: derived from the model config
    std::size_t workers = 1;
    BenchGrid grid;

    /// Applies family-dependent defaults, then every key present in `kv`.
    /// Unknown keys raise ConfigError naming the key.
    static ExperimentConfig from_kv(const KeyValueConfig& kv);
    /// Fully resolved form; parsing it back yields the same configuration.
    KeyValueConfig to_kv() const;
    std::string resolved_text() const { return to_kv().to_text(); }
    /// 16 hex digits of FNV-1a over the resolved text.
    std::string hash() const;

    MetricKind metric() const;
    std::string run_label() const;
};

std::string default_label(const ModelConfig& model);

/// Loads the file (if any), applies overrides and resolves.
ExperimentConfig load_experiment(const std::optional<std::filesystem::path>& path,
                                 const std::vector<std::string>& overrides);

/// Datasets resolved for one experiment, shared read-only by its runs.
struct PreparedData {
    std::optional<ImageDataset> train_images;
    std::optional<ImageDataset> eval_images;
    std::optional<TokenCorpus> corpus;
    std::vector<std::size_t> eval_stream;
    std::optional<double> entropy_rate;
    double threshold = 0.0;
};

PreparedData prepare_data(const ExperimentConfig& config);

struct SeedResult {
    std::uint64_t seed = 0;
    RunRecord record;
    std::filesystem::path csv;
    std::filesystem::path checkpoint;
};

/// Trains one seed and writes its CSV, log and checkpoint under
/// <out>/<label>/.
SeedResult run_seed(const ExperimentConfig& config, const PreparedData& data, std::uint64_t seed,
                    std::ostream* progress = nullptr);

/// Every seed of the configuration, up to `workers` at a time.
std::vector<SeedResult> cmd_train(const ExperimentConfig& config, std::ostream& out);

struct SummaryRow {
    std::string model;
    std::size_t n = 0;
    std::string variant;
    std::string m1;
    std::string m2;
    std::size_t diverged = 0;
    std::size_t unreached = 0;
    std::size_t seeds = 0;
    std::string config_hash;
};

inline constexpr const char* kSummaryHeader =
    "model,n,variant,m1,m2,diverged,unreached,seeds,config_hash";
inline constexpr const char* kPerDepthHeader =
    "family,depth,n,variant,seed,epochs_to_threshold,diverged,best_metric,final_metric";

/// Configuration of one grid cell.
ExperimentConfig bench_cell(const ExperimentConfig& base, const std::string& variant,
                            std::size_t n, std::size_t depth);

/// Runs the grid, then writes summary.csv and per_depth.csv in the output
/// directory.
std::vector<SummaryRow> cmd_bench(const ExperimentConfig& config, std::ostream& out);

/// Rebuilds the summary from the per-seed CSVs already on disk.
std::vector<SummaryRow> summarize_bench(const ExperimentConfig& config);

struct GradcheckCase {
    std::string name;  ///< "<layer>:<tensor>"
    std::function<double()> run;
};

std::vector<GradcheckCase> default_gradcheck_cases();

/// Runs every case whose layer matches `scope` ("all" for every case) and
/// prints one line per case. Returns the process exit status.
int cmd_gradcheck(const std::vector<GradcheckCase>& cases, const std::string& scope,
                  std::ostream& out, double tolerance = 1e-4);

/// Text report of a checkpoint: config, parameter counts, gate values.
void cmd_inspect(const std::filesystem::path& checkpoint, std::ostream& out);

/// Command-line entry point shared by the executable and the tests.
int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace phydi

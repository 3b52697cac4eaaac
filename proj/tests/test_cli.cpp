#include "phydi/errors.hpp"
#include "phydi/grad_check.hpp"
#include "phydi/harness.hpp"
#include "phydi/ops.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <regex>
#include <sstream>

namespace phydi {
namespace {

using testing::slurp;
using testing::spit;
using testing::TempDir;

struct CliResult {
    int code;
    std::string out;
    std::string err;
};

CliResult cli(std::vector<std::string> args) {
    args.insert(args.begin(), "phydi");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    std::ostringstream out, err;
    const int code = run_cli(int(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

constexpr const char* kTinyResNet = R"(# small image experiment
[model]
family = phresnet
depth = 2
widths = 4,4,4,4
stem_stride = 4
downsample = false
[data]
dataset = synthetic_classification
size = 64
eval_size = 32
noise = 0.3
[train]
epochs = 1
batch_size = 16
lr = 0.05
[run]
seeds = 1
)";

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
}

// Drops the wall_seconds column (fifth field) from every line.
std::string without_wall_clock(const std::string& csv) {
    std::string out;
    for (const auto& line : lines_of(csv)) {
        std::vector<std::string> fields;
        std::stringstream ss(line);
        for (std::string f; std::getline(ss, f, ',');) fields.push_back(f);
        for (std::size_t i = 0; i < fields.size(); ++i)
            if (i != 4) out += fields[i] + ",";
        out += "\n";
    }
    return out;
}

TEST(Train, OneEpochGivesOneRow) {
    TempDir dir;
    spit(dir / "tiny.cfg", kTinyResNet);
    auto r = cli({"train", "--config", (dir / "tiny.cfg").string(), "--out", (dir / "runs").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto run_dir = dir / "runs" / "phresnet-d2-n2-standard";
    auto rows = lines_of(slurp(run_dir / "seed1.csv"));
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0], "epoch,train_loss,eval_metric,lr,wall_seconds,diverged");
    EXPECT_EQ(rows[1].substr(0, 2), "1,");
    EXPECT_TRUE(std::filesystem::exists(run_dir / "seed1.ckpt"));
    EXPECT_TRUE(std::filesystem::exists(run_dir / "seed1.log.jsonl"));
    const std::string resolved = slurp(run_dir / "config.resolved");
    EXPECT_NE(resolved.find("train.epochs = 1"), std::string::npos);
    EXPECT_NE(resolved.find("model.depth = 2"), std::string::npos);
}

TEST(Train, SameSeedIsByteIdentical) {
    TempDir dir;
    spit(dir / "tiny.cfg", kTinyResNet);
    for (const char* out : {"a", "b"}) {
        auto r = cli({"train", "--config", (dir / "tiny.cfg").string(), "--out", (dir / out).string(), "--set",
                      "train.epochs=2", "--seed-list", "3"});
        ASSERT_EQ(r.code, 0) << r.err;
    }
    const auto a = dir / "a" / "phresnet-d2-n2-standard", b = dir / "b" / "phresnet-d2-n2-standard";
    EXPECT_EQ(without_wall_clock(slurp(a / "seed3.csv")), without_wall_clock(slurp(b / "seed3.csv")));
    EXPECT_EQ(slurp(a / "seed3.ckpt"), slurp(b / "seed3.ckpt"));
    EXPECT_EQ(lines_of(slurp(a / "seed3.csv")).size(), 3u);
}

TEST(Train, SeedsChangeResults) {
    TempDir dir;
    spit(dir / "tiny.cfg", kTinyResNet);
    auto r = cli({"train", "--config", (dir / "tiny.cfg").string(), "--out", dir.path().string(), "--seed-list",
                  "1,2"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto run = dir / "phresnet-d2-n2-standard";
    EXPECT_NE(slurp(run / "seed1.ckpt"), slurp(run / "seed2.ckpt"));
}

TEST(Train, InjectedNanIsRecordedNotFailed) {
    TempDir dir;
    spit(dir / "tiny.cfg", kTinyResNet);
    auto r = cli({"train", "--config", (dir / "tiny.cfg").string(), "--out", dir.path().string(), "--set",
                  "train.epochs=4", "--set", "debug.inject_nan_epoch=2"});
    ASSERT_EQ(r.code, 0) << r.err;
    auto rows = lines_of(slurp(dir / "phresnet-d2-n2-standard" / "seed1.csv"));
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_TRUE(rows[1].ends_with(",false")) << rows[1];
    EXPECT_EQ(rows[2].substr(0, 2), "2,");
    EXPECT_TRUE(rows[2].ends_with(",true")) << rows[2];
}

TEST(Train, ConfigErrorsNameTheField) {
    TempDir dir;
    spit(dir / "tiny.cfg", kTinyResNet);
    auto r = cli({"train", "--config", (dir / "tiny.cfg").string(), "--set", "train.epoch=3"});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("train.epoch"), std::string::npos) << r.err;
    auto bad = cli({"train", "--config", (dir / "tiny.cfg").string(), "--set", "train.lr=fast"});
    EXPECT_EQ(bad.code, 2);
    EXPECT_NE(bad.err.find("train.lr"), std::string::npos) << bad.err;
    auto missing = cli({"train", "--config", (dir / "absent.cfg").string()});
    EXPECT_EQ(missing.code, 3);
    auto no_data = cli({"train", "--set", "data.dataset=cifar10", "--set", "data.dir=" + (dir / "nothing").string(),
                        "--out", dir.path().string()});
    EXPECT_NE(no_data.code, 0);
    auto usage = cli({"frobnicate"});
    EXPECT_NE(usage.code, 0);
}

TEST(Gradcheck, AllLayersPass) {
    auto r = cli({"gradcheck"});
    EXPECT_EQ(r.code, 0) << r.out;
    for (const char* layer : {"phm:", "phc:", "phatt:", "residual:", "transformer_postnorm:", "transformer_prenorm:",
                              "transformer_phydi:", "layernorm:", "loss:"})
        EXPECT_NE(r.out.find(layer), std::string::npos) << layer;
}

TEST(Gradcheck, ScopeSelectsExactlyThoseEntries) {
    auto r = cli({"gradcheck", "phm"});
    ASSERT_EQ(r.code, 0);
    std::size_t cases = 0;
    for (const auto& line : lines_of(r.out)) {
        if (line.find(':') == std::string::npos || line.find("max") == 0) continue;
        if (line.rfind("phm:", 0) == 0) {
            ++cases;
            continue;
        }
        EXPECT_EQ(line.find("phc:"), std::string::npos) << line;
        EXPECT_EQ(line.find("phatt:"), std::string::npos) << line;
    }
    EXPECT_GT(cases, 0u);
    auto unknown = cli({"gradcheck", "nonsense"});
    EXPECT_EQ(unknown.code, 2);
}

// An op whose recorded backward rule is deliberately wrong.
Tensor broken_double(const Tensor& x) {
    std::vector<double> v(x.data().begin(), x.data().end());
    for (double& e : v) e *= 2.0;
    return Tensor::make_op("broken_double", x.shape(), std::move(v), {x},
                           [](std::span<const double> g, std::span<const double>, const GradSinks& sinks) {
                               if (!sinks.wants(0)) return;
                               auto dx = sinks[0];
                               for (std::size_t i = 0; i < g.size(); ++i) dx[i] += 3.0 * g[i];
                           });
}

TEST(Gradcheck, CorruptedBackwardRuleFails) {
    std::vector<GradcheckCase> cases = default_gradcheck_cases();
    cases.push_back({"phm:corrupted", [] {
                         Tensor x = testing::random_tensor({2, 3}, 4, true);
                         return finite_diff_check([&](const Tensor& t) { return sum(broken_double(t)); }, x);
                     }});
    std::ostringstream out;
    EXPECT_EQ(cmd_gradcheck(cases, "phm", out), 1);
    EXPECT_NE(out.str().find("phm:corrupted"), std::string::npos);
    std::ostringstream clean;
    EXPECT_EQ(cmd_gradcheck(cases, "phc", clean), 0);
}

TEST(Inspect, FreshPhydiAndWkpGates) {
    TempDir dir;
    for (InitVariant variant : {InitVariant::phydi, InitVariant::wkp}) {
        ModelConfig cfg;
        cfg.depth = 2;
        cfg.widths = {4, 4, 4, 4};
        cfg.variant = variant;
        const auto ckpt = dir / (to_string(variant) + ".ckpt");
        save_checkpoint(*build_model(cfg), ckpt);
        auto report = cli({"inspect", ckpt.string()});
        ASSERT_EQ(report.code, 0) << report.err;
        const std::string want = variant == InitVariant::phydi ? "0.0" : "1.0";
        std::regex gate_line(R"(^(\S+) = (\S+)$)");
        bool in_gates = false;
        std::size_t gates = 0;
        for (const auto& line : lines_of(report.out)) {
            if (line.rfind("[", 0) == 0) {
                in_gates = line == "[gates]";
                continue;
            }
            std::smatch m;
            if (in_gates && std::regex_match(line, m, gate_line)) {
                ++gates;
                EXPECT_EQ(m[2].str(), want) << line;
            }
        }
        EXPECT_GT(gates, 0u) << report.out;
    }
}

TEST(Inspect, RatioMatchesParameterCount) {
    TempDir dir;
    ModelConfig cfg;
    cfg.widths = {4, 8, 8, 16};
    auto model = build_model(cfg);
    save_checkpoint(*model, dir / "m.ckpt");
    auto r = cli({"inspect", (dir / "m.ckpt").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const ParamCount c = model->param_count();
    const auto [num, den] = c.ratio();
    EXPECT_NE(r.out.find("ph_params = " + std::to_string(c.ph_params)), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("dense_equivalent = " + std::to_string(c.dense_equivalent)), std::string::npos);
    EXPECT_NE(r.out.find(std::to_string(num) + "/" + std::to_string(den)), std::string::npos) << r.out;
    spit(dir / "junk.ckpt", "not a checkpoint");
    EXPECT_EQ(cli({"inspect", (dir / "junk.ckpt").string()}).code, 4);
}

std::string bench_config() {
    return std::string(kTinyResNet) + "[bench]\nvariants = standard,phydi\nn = 2\ndepths = 2\n[thresholds]\naccuracy = 0.3\n";
}

TEST(Bench, GridProducesRowsAndPureSummary) {
    TempDir dir;
    spit(dir / "bench.cfg", bench_config());
    auto r = cli({"bench", "--config", (dir / "bench.cfg").string(), "--out", dir.path().string(), "--seed-list",
                  "1,2,3", "--set", "train.epochs=2"});
    ASSERT_EQ(r.code, 0) << r.err;
    std::size_t csvs = 0;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir.path()))
        if (e.path().filename().string().rfind("seed", 0) == 0 && e.path().extension() == ".csv") ++csvs;
    EXPECT_EQ(csvs, 6u);
    const std::string summary = slurp(dir / "summary.csv");
    auto rows = lines_of(summary);
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows[0], kSummaryHeader);
    bool saw_phydi = false;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        EXPECT_EQ(rows[i].rfind("PHResNet2,2,", 0), 0u) << rows[i];
        if (rows[i].find(",phydi,") != std::string::npos) {
            saw_phydi = true;
            EXPECT_NE(rows[i].find(",-,"), std::string::npos) << rows[i];
        }
        EXPECT_TRUE(std::regex_search(rows[i], std::regex(",[0-9a-f]{16}$"))) << rows[i];
    }
    EXPECT_TRUE(saw_phydi);
    auto per_depth = lines_of(slurp(dir / "per_depth.csv"));
    EXPECT_EQ(per_depth.size(), 7u);
    EXPECT_EQ(per_depth[0], kPerDepthHeader);

    const std::string long_csv = slurp(dir / "per_depth.csv");
    std::filesystem::remove(dir / "summary.csv");
    auto again = cli({"bench", "--config", (dir / "bench.cfg").string(), "--out", dir.path().string(), "--seed-list",
                      "1,2,3", "--set", "train.epochs=2", "--summarize-only"});
    ASSERT_EQ(again.code, 0) << again.err;
    EXPECT_EQ(slurp(dir / "summary.csv"), summary);
    EXPECT_EQ(slurp(dir / "per_depth.csv"), long_csv);
}

TEST(Bench, MissingPhydiCounterpartIsConfigError) {
    TempDir dir;
    spit(dir / "bench.cfg", bench_config());
    auto r = cli({"bench", "--config", (dir / "bench.cfg").string(), "--out", dir.path().string(), "--set",
                  "bench.variants=standard,wkp"});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("phydi"), std::string::npos) << r.err;
    auto no_beat = cli({"bench", "--config", (dir / "bench.cfg").string(), "--out", dir.path().string(), "--set",
                        "bench.variants=standard", "--set", "bench.beat_metric=false", "--set", "train.epochs=1"});
    EXPECT_EQ(no_beat.code, 0) << no_beat.err;
}

TEST(Experiment, FamilyDefaultsAndHash) {
    ExperimentConfig img = load_experiment(std::nullopt, {});
    EXPECT_EQ(img.train.optimizer, OptimizerKind::sgd_momentum);
    EXPECT_DOUBLE_EQ(img.thresholds.accuracy, 0.8);
    EXPECT_DOUBLE_EQ(img.thresholds.perplexity, 200.0);
    EXPECT_FALSE(img.seeds.empty());
    ExperimentConfig lm = load_experiment(std::nullopt, {"model.family=phtransformer", "data.dataset=synthetic_lm"});
    EXPECT_EQ(lm.train.optimizer, OptimizerKind::adagrad);
    EXPECT_DOUBLE_EQ(lm.train.lr, 0.01);
    EXPECT_EQ(lm.model.variant, InitVariant::phydi);
    EXPECT_EQ(lm.metric(), MetricKind::perplexity);
    EXPECT_NE(img.hash(), lm.hash());
    EXPECT_EQ(img.hash(), load_experiment(std::nullopt, {}).hash());
    EXPECT_THROW(load_experiment(std::nullopt, {"run.seeds="}), ConfigError);
    EXPECT_THROW(load_experiment(std::nullopt, {"thresholds.accuracy=-1"}), ConfigError);
}

}  // namespace
}  // namespace phydi

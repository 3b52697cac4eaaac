#include "phydi/errors.hpp"
#include "phydi/ops.hpp"
#include "phydi/training.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <json.hpp>

#include <cmath>
#include <limits>
#include <sstream>

namespace phydi {
namespace {

using testing::random_tensor;

// loss = 0.5 * curvature * theta^2, so g = curvature * theta.
void quadratic_grad(const Tensor& theta, double curvature) {
    sum(mul_scalar(mul(theta, theta), 0.5 * curvature)).backward();
}

TEST(Sgd, UnitStepDecreasesByGradient) {
    ParameterRegistry reg;
    Tensor theta = Tensor::from_data({1}, {3.0}, true);
    reg.add("theta", theta);
    auto state = OptimizerState::create(OptimizerKind::sgd_momentum, 1.0, 0.0, 0.0, reg);
    sum(theta).backward();
    sgd_step(state, reg);
    EXPECT_EQ(theta.item(), 2.0);
    EXPECT_FALSE(theta.has_grad() && theta.grad()[0] != 0.0);
}

TEST(Sgd, MatchesHandRecurrence) {
    ParameterRegistry reg;
    Tensor theta = Tensor::from_data({1}, {2.0}, true);
    reg.add("theta", theta);
    const double lr = 0.05, m = 0.9, wd = 0.01, c = 3.0;
    auto state = OptimizerState::create(OptimizerKind::sgd_momentum, lr, m, wd, reg);
    double t = 2.0, v = 0.0;
    for (int i = 0; i < 10; ++i) {
        quadratic_grad(theta, c);
        sgd_step(state, reg);
        v = m * v + c * t + wd * t;
        t -= lr * v;
        ASSERT_NEAR(theta.item(), t, 1e-12) << i;
    }
}

TEST(Adagrad, FirstStepIsSignTimesLr) {
    ParameterRegistry reg;
    Tensor theta = Tensor::from_data({2}, {0.0, 0.0}, true);
    reg.add("theta", theta);
    auto state = OptimizerState::create(OptimizerKind::adagrad, 0.01, 0.0, 0.0, reg);
    sum(mul(theta, Tensor::from_data({2}, {4.0, -0.25}))).backward();
    adagrad_step(state, reg);
    EXPECT_NEAR(theta.data()[0], -0.01 * 4.0 / (4.0 + 1e-10), 1e-15);
    EXPECT_NEAR(theta.data()[1], 0.01 * 0.25 / (0.25 + 1e-10), 1e-15);
    EXPECT_NEAR(theta.data()[1], 0.01, 1e-10);
}

TEST(Adagrad, MatchesHandRecurrence) {
    ParameterRegistry reg;
    Tensor theta = Tensor::from_data({1}, {1.5}, true);
    reg.add("theta", theta);
    const double lr = 0.3, wd = 0.02, c = 2.0;
    auto state = OptimizerState::create(OptimizerKind::adagrad, lr, 0.0, wd, reg);
    double t = 1.5, acc = 0.0;
    for (int i = 0; i < 10; ++i) {
        quadratic_grad(theta, c);
        optimizer_step(state, reg);
        const double g = c * t + wd * t;
        acc += g * g;
        t -= lr * g / (std::sqrt(acc) + 1e-10);
        ASSERT_NEAR(theta.item(), t, 1e-12) << i;
    }
}

TEST(Sgd, ConvexQuadraticConverges) {
    ParameterRegistry reg;
    Tensor theta = random_tensor({5}, 1, true, -3, 3);
    reg.add("theta", theta);
    Tensor diag = Tensor::from_data({5}, {1, 2, 0.5, 3, 1.5});
    auto loss = [&] { return sum(mul(mul(theta, theta), diag)); };
    const double start = loss().item();
    auto state = OptimizerState::create(OptimizerKind::sgd_momentum, 0.05, 0.5, 0.0, reg);
    for (int i = 0; i < 200; ++i) {
        loss().backward();
        sgd_step(state, reg);
    }
    EXPECT_LT(loss().item(), start / 100.0);
}

TEST(Optimizer, MissingGradientIsError) {
    ParameterRegistry reg;
    Tensor a = Tensor::from_data({1}, {1.0}, true);
    Tensor b = Tensor::from_data({1}, {1.0}, true);
    reg.add("a", a);
    reg.add("b", b);
    auto state = OptimizerState::create(OptimizerKind::sgd_momentum, 0.1, 0.9, 0.0, reg);
    sum(a).backward();
    EXPECT_THROW(sgd_step(state, reg), ContractError);
    auto ada = OptimizerState::create(OptimizerKind::adagrad, 0.1, 0.0, 0.0, reg);
    EXPECT_THROW(adagrad_step(ada, reg), ContractError);
}

TEST(Optimizer, AccumulatorsMirrorParameters) {
    ParameterRegistry reg;
    reg.add("w", Tensor::zeros({3, 4}, true));
    reg.add("b", Tensor::zeros({4}, true));
    auto state = OptimizerState::create(OptimizerKind::adagrad, 0.1, 0.0, 0.0, reg);
    ASSERT_EQ(state.accumulators.size(), 2u);
    EXPECT_EQ(state.accumulators[0].size(), 12u);
    EXPECT_EQ(state.accumulators[1].size(), 4u);
    EXPECT_THROW(OptimizerState::create(OptimizerKind::adagrad, 0.0, 0.0, 0.0, reg), Error);
    EXPECT_EQ(parse_optimizer("sgd"), OptimizerKind::sgd_momentum);
    EXPECT_EQ(parse_optimizer("adagrad"), OptimizerKind::adagrad);
}

TEST(StepLr, Milestones) {
    const std::vector<std::size_t> ms{10, 20};
    EXPECT_DOUBLE_EQ(step_lr(0, 0.3, ms, 0.1), 0.3);
    EXPECT_DOUBLE_EQ(step_lr(9, 0.3, ms, 0.1), 0.3);
    EXPECT_DOUBLE_EQ(step_lr(10, 0.3, ms, 0.1), 0.3 * 0.1);
    EXPECT_DOUBLE_EQ(step_lr(15, 0.3, ms, 0.1), 0.3 * 0.1);
    EXPECT_DOUBLE_EQ(step_lr(25, 0.3, ms, 0.1), 0.3 * 0.1 * 0.1);
}

TEST(Perplexity, UniformAndThreshold) {
    EXPECT_NEAR(perplexity(std::log(37.0)), 37.0, 1e-10);
    EXPECT_NEAR(perplexity(5.2983173665480363), 200.0, 1e-9);
}

TEST(Perplexity, ThreeTokenProductFormula) {
    // Model probabilities of the observed tokens.
    Tensor logits = Tensor::from_data({3, 3}, {1.0, 2.0, 0.5, 0.0, 0.0, 3.0, -1.0, 1.0, 1.0});
    std::vector<std::size_t> targets{1, 2, 0};
    double product = 1.0;
    for (std::size_t r = 0; r < 3; ++r) {
        double z = 0.0;
        for (std::size_t c = 0; c < 3; ++c) z += std::exp(logits.data()[r * 3 + c]);
        product *= std::exp(logits.data()[r * 3 + targets[r]]) / z;
    }
    EXPECT_NEAR(perplexity(cross_entropy(logits, targets).item()), std::pow(product, -1.0 / 3.0), 1e-12);
}

RunRecord record_of(MetricKind metric, std::vector<double> values) {
    RunRecord r;
    r.metric = metric;
    for (std::size_t i = 0; i < values.size(); ++i) r.append({i + 1, 1.0, values[i], 0.1, 1.0, false});
    return r;
}

TEST(Metrics, EpochsToThreshold) {
    EXPECT_EQ(epochs_to_threshold(record_of(MetricKind::accuracy, {0.5, 0.85}), MetricKind::accuracy, 0.8), 2u);
    EXPECT_FALSE(epochs_to_threshold(record_of(MetricKind::accuracy, {0.5, 0.6}), MetricKind::accuracy, 0.8));
    EXPECT_EQ(epochs_to_threshold(record_of(MetricKind::perplexity, {400, 250, 199, 180}), MetricKind::perplexity,
                                  200.0),
              3u);
    EXPECT_EQ(epochs_to_threshold(record_of(MetricKind::accuracy, {0.8}), MetricKind::accuracy, 0.8), 1u);
}

TEST(Metrics, EpochsToThresholdIsMonotone) {
    Rng rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> acc(8);
        for (double& a : acc) a = u(rng);
        auto before = epochs_to_threshold(record_of(MetricKind::accuracy, acc), MetricKind::accuracy, 0.7);
        const std::size_t i = trial % acc.size();
        acc[i] = std::min(1.0, acc[i] + u(rng));
        auto after = epochs_to_threshold(record_of(MetricKind::accuracy, acc), MetricKind::accuracy, 0.7);
        if (before) {
            ASSERT_TRUE(after);
            ASSERT_LE(*after, *before);
        }
    }
}

TEST(Metrics, EpochsToBeat) {
    RunRecord baseline = record_of(MetricKind::accuracy, {0.6, 0.70, 0.65});
    EXPECT_EQ(epochs_to_beat(baseline, record_of(MetricKind::accuracy, {0.5, 0.72})), 2u);
    EXPECT_FALSE(epochs_to_beat(baseline, record_of(MetricKind::accuracy, {0.5, 0.70})));
    RunRecord ppl = record_of(MetricKind::perplexity, {300, 150});
    EXPECT_EQ(epochs_to_beat(ppl, record_of(MetricKind::perplexity, {200, 149})), 2u);
    EXPECT_THROW(epochs_to_beat(baseline, ppl), Error);
}

TEST(Metrics, DivergedBaselineIsBeatenByAnyFiniteRun) {
    RunRecord baseline;
    baseline.append({1, std::nan(""), std::nan(""), 0.1, 1.0, true});
    EXPECT_FALSE(baseline.best_metric());
    EXPECT_EQ(epochs_to_beat(baseline, record_of(MetricKind::accuracy, {0.1})), 1u);
}

TEST(Aggregate, Formats) {
    std::vector<double> same{6, 6, 6};
    EXPECT_EQ(aggregate_values(same).format(), "6.00 ± 0.00");
    std::vector<double> spread{5, 6, 7};
    Aggregate a = aggregate_values(spread);
    EXPECT_DOUBLE_EQ(a.mean, 6.0);
    EXPECT_NEAR(a.standard_error, 1.0 / std::sqrt(3.0), 1e-15);
    EXPECT_EQ(a.format(3), "6.000 ± 0.577");
    std::vector<double> table_like{5, 9, 5};
    EXPECT_EQ(aggregate_values(table_like).format(), "6.33 ± 1.33");
    std::vector<double> one{1};
    EXPECT_THROW(aggregate_values(one), ContractError);
}

TEST(Aggregate, RunsSkipUnreached) {
    std::vector<RunRecord> runs{record_of(MetricKind::accuracy, {0.9}), record_of(MetricKind::accuracy, {0.1, 0.9}),
                                record_of(MetricKind::accuracy, {0.1, 0.2})};
    auto agg = aggregate_runs(runs, MetricKind::accuracy, 0.8);
    ASSERT_TRUE(agg);
    EXPECT_EQ(agg->count, 2u);
    EXPECT_DOUBLE_EQ(agg->mean, 1.5);
    std::vector<RunRecord> mostly_failed{runs[0], runs[2]};
    EXPECT_FALSE(aggregate_runs(mostly_failed, MetricKind::accuracy, 0.8));
    std::vector<RunRecord> single{runs[0]};
    EXPECT_THROW(aggregate_runs(single, MetricKind::accuracy, 0.8), ContractError);
}

TEST(RunRecord, AppendInvariants) {
    RunRecord r;
    r.append({1, 1.0, 0.5, 0.1, 1.0, false});
    EXPECT_THROW(r.append({1, 1.0, 0.5, 0.1, 1.0, false}), ContractError);
    r.append({3, 1.0, std::nan(""), 0.1, 1.0, true});
    EXPECT_TRUE(r.diverged());
    EXPECT_THROW(r.append({4, 1.0, 0.5, 0.1, 1.0, false}), ContractError);
}

TEST(RunRecord, CsvRoundTrip) {
    RunRecord r = record_of(MetricKind::perplexity, {812.25, 0.1 + 0.2});
    r.append({3, std::numeric_limits<double>::infinity(), std::nan(""), 0.01, 2.5, true});
    std::stringstream ss;
    write_run_csv(r, ss);
    std::string header;
    std::getline(std::stringstream(ss.str()), header);
    EXPECT_EQ(header, kRunCsvHeader);
    RunRecord back = read_run_csv(ss, MetricKind::perplexity);
    ASSERT_EQ(back.entries.size(), 3u);
    EXPECT_EQ(back.entries[1].eval_metric, 0.1 + 0.2);
    EXPECT_TRUE(std::isnan(back.entries[2].eval_metric));
    EXPECT_TRUE(back.entries[2].diverged);
    std::stringstream bad("nope\n1,2,3\n");
    EXPECT_THROW(read_run_csv(bad, MetricKind::accuracy), FormatError);
}

TEST(RunRecord, LogIsJsonLines) {
    RunRecord r = record_of(MetricKind::accuracy, {0.25, 0.5});
    r.seed = 4;
    r.notes = {"stem padded"};
    std::stringstream ss;
    write_run_log(r, ss);
    std::string line;
    std::size_t count = 0;
    while (std::getline(ss, line)) {
        auto j = nlohmann::json::parse(line);
        EXPECT_TRUE(j.is_object());
        ++count;
    }
    EXPECT_EQ(count, 3u);
}

ModelConfig tiny_resnet(InitVariant v) {
    ModelConfig c;
    c.depth = 2;
    c.widths = {4, 4, 4, 4};
    c.variant = v;
    c.downsample = false;
    c.stem_stride = 4;
    c.classes = 4;
    return c;
}

ImageDataset tiny_images(const std::string& split, std::size_t size) {
    SyntheticImageOptions o;
    o.classes = 4;
    o.size = size;
    o.noise = 0.1;
    o.seed = 5;
    return synthetic_classification(o, split);
}

TEST(TrainClassifier, LossDecreasesAndRecordIsWellFormed) {
    auto model = build_phresnet(tiny_resnet(InitVariant::standard));
    ImageDataset train = tiny_images("train", 128), eval = tiny_images("test", 64);
    TrainSettings s;
    s.epochs = 3;
    s.batch_size = 16;
    s.lr = 0.05;
    std::size_t callbacks = 0;
    RunRecord r = train_classifier(*model, train, eval, s, [&](const EpochEntry&) { ++callbacks; });
    ASSERT_EQ(r.entries.size(), 3u);
    EXPECT_EQ(callbacks, 3u);
    EXPECT_LT(r.entries.back().train_loss, r.entries.front().train_loss);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(r.entries[i].epoch, i + 1);
        EXPECT_FALSE(r.entries[i].diverged);
        EXPECT_GE(r.entries[i].eval_metric, 0.0);
        EXPECT_LE(r.entries[i].eval_metric, 1.0);
    }
}

TEST(TrainClassifier, NanInjectionStopsRun) {
    auto model = build_phresnet(tiny_resnet(InitVariant::phydi));
    ImageDataset train = tiny_images("train", 64), eval = tiny_images("test", 32);
    TrainSettings s;
    s.epochs = 5;
    s.batch_size = 16;
    s.inject_nan_epoch = 2;
    RunRecord r = train_classifier(*model, train, eval, s);
    ASSERT_EQ(r.entries.size(), 2u);
    EXPECT_TRUE(r.diverged());
    EXPECT_TRUE(std::isnan(r.entries.back().eval_metric));
    EXPECT_FALSE(r.entries.front().diverged);
}

TEST(TrainClassifier, ExplodingLearningRateIsRecordedAsDivergence) {
    auto model = build_phresnet(tiny_resnet(InitVariant::standard));
    ImageDataset train = tiny_images("train", 64), eval = tiny_images("test", 32);
    TrainSettings s;
    s.epochs = 20;
    s.batch_size = 16;
    s.lr = 1e6;
    RunRecord r = train_classifier(*model, train, eval, s);
    EXPECT_TRUE(r.diverged());
    EXPECT_LT(r.entries.size(), 20u);
}

TEST(TrainClassifier, StopsAtThreshold) {
    auto model = build_phresnet(tiny_resnet(InitVariant::standard));
    ImageDataset train = tiny_images("train", 64), eval = tiny_images("test", 32);
    TrainSettings s;
    s.epochs = 4;
    s.batch_size = 16;
    s.stop_threshold = 0.0;
    RunRecord r = train_classifier(*model, train, eval, s);
    EXPECT_EQ(r.entries.size(), 1u);
}

TEST(TrainLanguageModel, PerplexityImproves) {
    SyntheticLMOptions o;
    o.vocab = 24;
    o.length = 3000;
    SyntheticLM lm = synthetic_lm(o);
    ModelConfig c;
    c.family = ModelFamily::phtransformer;
    c.variant = InitVariant::phydi;
    c.depth = 2;
    c.d_model = 8;
    c.heads = 2;
    c.vocab = 24;
    c.seq_len = 16;
    auto model = build_phtransformer(c);
    const double initial = evaluate_perplexity(*model, lm.corpus.valid, 4, 16);
    TrainSettings s;
    s.epochs = 2;
    s.batch_size = 8;
    s.eval_batch_size = 4;
    s.optimizer = OptimizerKind::adagrad;
    s.lr = 0.05;
    s.weight_decay = 0.0;
    RunRecord r = train_language_model(*model, lm.corpus.train, lm.corpus.valid, s);
    EXPECT_EQ(r.metric, MetricKind::perplexity);
    ASSERT_EQ(r.entries.size(), 2u);
    EXPECT_LT(r.entries.back().eval_metric, initial);
    EXPECT_GT(r.entries.back().eval_metric, std::exp(lm.entropy_rate) * 0.99);
}

}  // namespace
}  // namespace phydi

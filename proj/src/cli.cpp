#include "phydi/errors.hpp"
#include "phydi/harness.hpp"

#include <CLI11.hpp>

#include <sstream>

namespace phydi {

namespace {

struct CommonFlags {
    std::string config;
    std::vector<std::string> overrides;
    std::string out;
    std::size_t workers = 0;
    std::string seed_list;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config, "Key-value configuration file");
        cmd->add_option("--set", overrides, "Override one key (key=value); repeatable")
            ->allow_extra_args(false);
        cmd->add_option("--out", out, "Output directory");
        cmd->add_option("--workers", workers, "Runs executed in parallel");
        cmd->add_option("--seed-list", seed_list, "Comma-separated seeds");
    }

    ExperimentConfig resolve() const {
        std::vector<std::string> all = overrides;
        if (!out.empty()) all.push_back("run.out=" + out);
        if (workers != 0) all.push_back("run.workers=" + std::to_string(workers));
        if (!seed_list.empty()) all.push_back("run.seeds=" + seed_list);
        return load_experiment(config.empty() ? std::nullopt
                                              : std::optional<std::filesystem::path>(config),
                               all);
    }
};

}  // namespace

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Parameterized hypercomplex networks with identity initialization"};
    app.require_subcommand(1);

    CommonFlags train_flags, bench_flags;
    auto* train = app.add_subcommand("train", "Train every seed of a configuration");
    train_flags.attach(train);
    auto* bench = app.add_subcommand("bench", "Run a variants x n x depths x seeds grid");
    bench_flags.attach(bench);
    bool summarize_only = false;
    bench->add_flag("--summarize-only", summarize_only, "Rebuild the summary from stored CSVs");

    std::string scope = "all";
    auto* gradcheck = app.add_subcommand("gradcheck", "Compare backward rules with finite differences");
    gradcheck->add_option("scope", scope, "Layer name or 'all'");

    std::string checkpoint;
    auto* inspect = app.add_subcommand("inspect", "Describe a checkpoint");
    inspect->add_option("checkpoint", checkpoint, "Checkpoint file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }

    try {
        if (*train) {
            const auto results = cmd_train(train_flags.resolve(), out);
            (void)results;
            return 0;
        }
        if (*bench) {
            const auto config = bench_flags.resolve();
            if (summarize_only) {
                const auto rows = summarize_bench(config);
                out << "summarized " << rows.size() << " rows into " << config.out_dir << "\n";
            } else {
                cmd_bench(config, out);
            }
            return 0;
        }
        if (*gradcheck) return cmd_gradcheck(default_gradcheck_cases(), scope, out);
        if (*inspect) {
            cmd_inspect(checkpoint, out);
            return 0;
        }
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ShapeError& e) {
        err << "config error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        err << "io error: " << e.what() << "\n";
        return 3;
    } catch (const FormatError& e) {
        err << "format error: " << e.what() << "\n";
        return 4;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return 5;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "io error: " << e.what() << "\n";
        return 3;
    }
    return 1;
}

}  // namespace phydi

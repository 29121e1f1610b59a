#include "mutualctr/config.hpp"
#include "mutualctr/experiment.hpp"
#include "mutualctr/log.hpp"

#include "CLI11.hpp"

#include <iostream>

using namespace mutualctr;

namespace {

struct CommonArgs {
    std::string config_path;
    cli::CliOverrides overrides;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "experiment config (JSON)")->required();
    auto* seed = cmd->add_option("--seed", "override training.seed");
    auto* out = cmd->add_option("--out", "override output.dir");
    auto* parallel = cmd->add_option("--parallel", "override experiment.parallel");
    auto* epochs = cmd->add_option("--epochs", "override training.epochs");
    auto* lambda = cmd->add_option("--lambda", "override training.lambda");
    cmd->callback([=, &args] {
        if (!seed->empty()) args.overrides.seed = seed->as<std::uint64_t>();
        if (!out->empty()) args.overrides.out_dir = out->as<std::string>();
        if (!parallel->empty()) args.overrides.parallel = parallel->as<std::size_t>();
        if (!epochs->empty()) args.overrides.epochs = epochs->as<std::size_t>();
        if (!lambda->empty()) args.overrides.lambda = lambda->as<double>();
    });
}

cli::ExperimentConfig load_config(const CommonArgs& args) {
    cli::ExperimentConfig cfg = cli::ExperimentConfig::load_file(args.config_path);
    cli::apply_overrides(cfg, args.overrides);
    return cfg;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"mutualctr: mutual-learning training for CTR models"};
    app.require_subcommand(1);

    CommonArgs prepare_args, train_args, experiment_args, eval_args, report_args;
    int rq = 0;
    std::string eval_checkpoint, eval_part = "test";

    CLI::App* prepare = app.add_subcommand("prepare", "build the schema and encoded example cache");
    add_common(prepare, prepare_args);

    CLI::App* train = app.add_subcommand("train", "run the configured training mode");
    add_common(train, train_args);

    CLI::App* experiment = app.add_subcommand("experiment", "run one of the RQ presets");
    add_common(experiment, experiment_args);
    experiment->add_option("--rq", rq, "research question preset (1-4)")->required();

    CLI::App* evalc = app.add_subcommand("eval", "evaluate a checkpoint on a dataset part");
    add_common(evalc, eval_args);
    evalc->add_option("--checkpoint", eval_checkpoint, "checkpoint file")->required();
    evalc->add_option("--part", eval_part, "train|dev|test (default test)");

    CLI::App* report = app.add_subcommand("report", "re-emit result tables from stored experiment cells");
    add_common(report, report_args);

    CLI11_PARSE(app, argc, argv);

    try {
        if (prepare->parsed()) {
            cli::ExperimentConfig cfg = load_config(prepare_args);
            std::cout << cfg.effective_json() << '\n';
            cli::cmd_prepare(cfg);
        } else if (train->parsed()) {
            cli::ExperimentConfig cfg = load_config(train_args);
            std::cout << cfg.effective_json() << '\n';
            cli::cmd_train(cfg);
        } else if (experiment->parsed()) {
            cli::ExperimentConfig cfg = load_config(experiment_args);
            std::cout << cfg.effective_json() << '\n';
            cli::cmd_experiment(cfg, rq);
        } else if (evalc->parsed()) {
            cli::ExperimentConfig cfg = load_config(eval_args);
            std::cout << cli::cmd_eval(cfg, eval_checkpoint, eval_part) << '\n';
        } else if (report->parsed()) {
            cli::ExperimentConfig cfg = load_config(report_args);
            cli::cmd_report(cfg);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}

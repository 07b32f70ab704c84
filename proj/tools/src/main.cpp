// Experiment driver. Every subcommand maps onto one experiment in the core
// library; exit codes are 2 for argument/config parse errors, 3 for
// validation errors, 1 for runtime failures.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "relusparse/experiment.hpp"

namespace {

using relusparse::ExperimentConfig;
using relusparse::ExperimentError;

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ExperimentError(3, "cannot read config file '" + path + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

struct Cli {
    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<std::string> out_dir, corpus_path;
    std::optional<std::uint64_t> seed;
    std::map<std::string, std::string> options;
    std::string experiment;
};

void add_opt(CLI::App* sub, Cli& cli, const std::string& flag, const std::string& key,
             const std::string& desc) {
    sub->add_option_function<std::string>(
        flag, [&cli, key](const std::string& v) { cli.options[key] = v; }, desc);
}

void add_common(CLI::App* sub, Cli& cli, const std::string& name) {
    sub->callback([&cli, name] { cli.experiment = name; });
    sub->add_option("--config", cli.config_path, "JSON experiment config file");
    sub->add_option("--set", cli.overrides,
                    "dotted config override, e.g. model.d_model=128 (repeatable)");
    sub->add_option("--out", cli.out_dir, "output directory");
    sub->add_option("--corpus", cli.corpus_path, "corpus text file");
    sub->add_option("--seed", cli.seed, "experiment seed");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sparse-FFN transformer experiments"};
    app.require_subcommand(1);
    Cli cli;

    auto* flops = app.add_subcommand("flops", "analytic per-token MAC accounting");
    add_common(flops, cli, "flops");
    add_opt(flops, cli, "--arch", "arch", "preset name or 'toy' for the model config");
    add_opt(flops, cli, "--profile", "profile", "qkv,up,down input sparsities");
    add_opt(flops, cli, "--compare-arch", "compare_arch",
            "preset to width-match against the effective MACs");

    auto* specdec = app.add_subcommand("specdec", "speculative decoding speedups");
    add_common(specdec, cli, "specdec");
    add_opt(specdec, cli, "--alpha", "alpha", "per-token acceptance probability");
    add_opt(specdec, cli, "--c", "c", "draft/target latency ratio");
    add_opt(specdec, cli, "--gamma-max", "gamma_max", "sweep upper bound");
    add_opt(specdec, cli, "--s", "s", "aggregated sparsity level");
    add_opt(specdec, cli, "--curve", "curve", "'constant' or 'power'");
    add_opt(specdec, cli, "--n-rounds", "n_rounds", "Monte-Carlo rounds (0 = off)");
    add_opt(specdec, cli, "--gamma", "gamma", "draft length for the simulation");

    auto* train = app.add_subcommand("train", "train a byte-level model");
    add_common(train, cli, "train");
    add_opt(train, cli, "--checkpoint", "checkpoint", "resume from checkpoint");

    auto* relufy = app.add_subcommand("relufy", "activation surgery on a checkpoint");
    add_common(relufy, cli, "relufy");
    add_opt(relufy, cli, "--checkpoint", "checkpoint", "input checkpoint");
    add_opt(relufy, cli, "--stage", "stage", "surgery stage, 1 or 2");

    auto* sparsity = app.add_subcommand("sparsity", "per-site input sparsity report");
    add_common(sparsity, cli, "sparsity");
    add_opt(sparsity, cli, "--checkpoint", "checkpoint", "model checkpoint");
    add_opt(sparsity, cli, "--relufy-stage", "relufy_stage", "apply surgery first (1 or 2)");
    add_opt(sparsity, cli, "--tau", "tau", "zero threshold");
    add_opt(sparsity, cli, "--n-windows", "n_windows", "validation windows to average");

    auto* hist = app.add_subcommand("hist", "FFN preactivation histogram");
    add_common(hist, cli, "hist");
    add_opt(hist, cli, "--checkpoint", "checkpoint", "model checkpoint");
    add_opt(hist, cli, "--relufy-stage", "relufy_stage", "apply surgery first (1 or 2)");
    add_opt(hist, cli, "--n-windows", "n_windows", "validation windows to average");

    auto* agg = app.add_subcommand("aggregated", "aggregated neuron-use trace");
    add_common(agg, cli, "aggregated");
    add_opt(agg, cli, "--checkpoint", "checkpoint", "model checkpoint");
    add_opt(agg, cli, "--relufy-stage", "relufy_stage", "apply surgery first (1 or 2)");
    add_opt(agg, cli, "--t-max", "t_max", "trace length in tokens");
    add_opt(agg, cli, "--tau", "tau", "zero threshold");

    auto* reuse = app.add_subcommand("reuse", "alternating weight-reuse sweep");
    add_common(reuse, cli, "reuse");
    add_opt(reuse, cli, "--checkpoint", "checkpoint", "ReLU model checkpoint");
    add_opt(reuse, cli, "--gammas", "gammas", "comma list of block lengths");
    add_opt(reuse, cli, "--seeds", "seeds", "comma list of random-policy seeds");
    add_opt(reuse, cli, "--warmup", "warmup", "conventional warmup tokens");
    add_opt(reuse, cli, "--horizon", "horizon", "evaluated tokens");
    add_opt(reuse, cli, "--tau", "tau", "zero threshold");
    add_opt(reuse, cli, "--n-windows", "n_windows", "validation windows to average");

    auto* beta = app.add_subcommand("beta_sweep", "activation-family training sweep");
    beta->alias("beta-sweep");
    add_common(beta, cli, "beta_sweep");

    auto* recovery = app.add_subcommand("recovery", "surgery + finetune recovery run");
    add_common(recovery, cli, "recovery");

    auto* shifted = app.add_subcommand("shifted_relu", "quantile-shifted ReLU run");
    shifted->alias("shifted-relu");
    add_common(shifted, cli, "shifted_relu");
    add_opt(shifted, cli, "--target", "target_sparsity", "target down-input sparsity");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        ExperimentConfig config;
        if (!cli.config_path.empty()) {
            std::string text = read_file(cli.config_path);
            for (const auto& ov : cli.overrides)
                text = ExperimentConfig::apply_override(text, ov);
            config = ExperimentConfig::from_json_text(text);
            if (config.experiment != cli.experiment)
                throw ExperimentError(3, "config selects experiment '" +
                                             config.experiment + "' but subcommand is '" +
                                             cli.experiment + "'");
        } else {
            if (!cli.overrides.empty()) {
                std::string text = "{\"experiment\":\"" + cli.experiment +
                                   "\",\"model\":" +
                                   relusparse::ModelConfig{}.to_json() + "}";
                for (const auto& ov : cli.overrides)
                    text = ExperimentConfig::apply_override(text, ov);
                config = ExperimentConfig::from_json_text(text);
            } else {
                config.experiment = cli.experiment;
            }
        }
        if (cli.out_dir) config.out_dir = *cli.out_dir;
        if (cli.corpus_path) config.corpus_path = *cli.corpus_path;
        if (cli.seed) config.seed = *cli.seed;
        for (const auto& [k, v] : cli.options) config.options[k] = v;

        const auto artifacts = relusparse::run_experiment(config);
        for (const auto& a : artifacts) std::cout << a << "\n";
        return 0;
    } catch (const ExperimentError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

// Copyright (c) 2026, The SMoRA Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "smora/checkpoint.hpp"
#include "smora/cli.hpp"

int main(int argc, char** argv) {
    using namespace smora::cli;
    CLI::App app{"SMoRA: rank-wise sparse mixture-of-experts LoRA"};
    app.require_subcommand(1);

    std::string config;
    auto* train = app.add_subcommand("train", "train an adapter, write checkpoint.smck and metrics.json");
    train->add_option("-c,--config", config, "run configuration (JSON)")->required();

    smora::BenchConfig bench;
    std::string bench_config;
    auto* bench_cmd = app.add_subcommand("bench", "time the indexed kernel against its oracles (JSON to stdout)");
    bench_cmd->add_option("-c,--config", bench_config, "take defaults from the config's bench section");
    bench_cmd->add_option("--t", bench.t, "tokens");
    bench_cmd->add_option("--d", bench.d, "model width");
    bench_cmd->add_option("--r", bench.r, "rank");
    bench_cmd->add_option("--k", bench.k, "activated ranks per token");
    bench_cmd->add_option("--dtype", bench.dtype, "f32 or f64");
    bench_cmd->add_option("--threads", bench.threads, "worker threads");
    bench_cmd->add_option("--repeats", bench.repeats, "timed repeats (median reported)");
    bench_cmd->add_option("--seed", bench.seed, "input seed");

    smora::EquivalenceSuiteConfig eq;
    auto* eq_cmd = app.add_subcommand("check-equivalence", "verify the MoE / blockwise LoRA identity");
    eq_cmd->add_option("--trials", eq.trials, "random instances");
    eq_cmd->add_option("--max-n", eq.max_n, "largest expert count");
    eq_cmd->add_option("--max-rank", eq.max_rank, "largest expert rank");
    eq_cmd->add_option("--max-dim", eq.max_dim, "largest d_in / d_out");
    eq_cmd->add_option("--seed", eq.seed, "suite seed");
    eq_cmd->add_option("--tolerance", eq.tolerance, "pass threshold on max |LHS - RHS|");

    auto* sweep = app.add_subcommand("sweep", "expert-granularity sweep, writes sweep.csv");
    sweep->add_option("-c,--config", config, "run configuration (JSON)")->required();
    auto* ablation = app.add_subcommand("rank-ablation", "SMoRA vs LoRA per activated rank, writes rank_ablation.csv");
    ablation->add_option("-c,--config", config, "run configuration (JSON)")->required();
    auto* analyze = app.add_subcommand("analyze", "similarity, routing and load-trace exports for a checkpoint");
    analyze->add_option("-c,--config", config, "run configuration (JSON)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kConfigError;
    }

    if (*train) return cmd_train(config, std::cout, std::cerr);
    if (*bench_cmd) {
        if (!bench_config.empty()) {
            // Explicit flags win over the config section.
            smora::BenchConfig base;
            try {
                base = load_run_config(bench_config).bench;
            } catch (const smora::IoError& e) {
                std::cerr << "error: " << e.what() << '\n';
                return kIoError;
            } catch (const std::invalid_argument& e) {
                std::cerr << "error: " << e.what() << '\n';
                return kConfigError;
            }
            auto pick = [&](const char* flag, auto& field, const auto& from) {
                if (bench_cmd->count(flag) == 0) field = from;
            };
            pick("--t", bench.t, base.t);
            pick("--d", bench.d, base.d);
            pick("--r", bench.r, base.r);
            pick("--k", bench.k, base.k);
            pick("--dtype", bench.dtype, base.dtype);
            pick("--threads", bench.threads, base.threads);
            pick("--repeats", bench.repeats, base.repeats);
            pick("--seed", bench.seed, base.seed);
        }
        return cmd_bench(bench, std::cout, std::cerr);
    }
    if (*eq_cmd) return cmd_check_equivalence(eq, std::cout, std::cerr);
    if (*sweep) return cmd_sweep(config, std::cout, std::cerr);
    if (*ablation) return cmd_rank_ablation(config, std::cout, std::cerr);
    if (*analyze) return cmd_analyze(config, std::cout, std::cerr);
    return kConfigError;
}

// Copyright (c) 2026, The SMoRA Authors
// SPDX-License-Identifier: Apache-2.0
//
// Run configuration and the command implementations behind the `smora`
// executable. Commands report through the given streams and return the
// process exit code: 0 ok, 2 configuration, 3 numeric failure, 4 I/O.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "smora/equivalence.hpp"
#include "smora/indexed_kernel.hpp"
#include "smora/training.hpp"

namespace smora::cli {

enum ExitCode : int { kOk = 0, kConfigError = 2, kNumericError = 3, kIoError = 4 };

inline constexpr std::uint32_t kConfigVersion = 1;

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct SweepSection {
    std::size_t r_total = 64;
    std::size_t r_active = 16;
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    std::size_t threads = 1;
};

struct AblationSection {
    std::size_t r_total = 64;
    std::vector<std::size_t> k_values{8};
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    std::size_t threads = 1;
};

struct AnalyzeSection {
    std::filesystem::path checkpoint;  // empty: <output>/checkpoint.smck
    std::filesystem::path metrics;     // optional RunMetrics JSON for the load trace
    bool cosine = false;
};

struct RunConfig {
    std::uint32_t version = kConfigVersion;
    std::uint64_t seed = 0;
    TaskSuiteSpec suite;
    TrainConfig train;  // train.seed is always `seed`
    BenchConfig bench;
    SweepSection sweep;
    AblationSection ablation;
    AnalyzeSection analyze;
    std::filesystem::path output = "out";
};

/// Strict parse: `version` is mandatory and unknown keys are rejected.
/// Relative paths resolve against `base_dir`.
RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& config);

BenchConfig bench_config_from_json(const nlohmann::json& j);

int cmd_train(const std::filesystem::path& config, std::ostream& out, std::ostream& err);
int cmd_bench(const BenchConfig& config, std::ostream& out, std::ostream& err);
int cmd_check_equivalence(const EquivalenceSuiteConfig& config, std::ostream& out, std::ostream& err);
int cmd_sweep(const std::filesystem::path& config, std::ostream& out, std::ostream& err);
int cmd_rank_ablation(const std::filesystem::path& config, std::ostream& out, std::ostream& err);
int cmd_analyze(const std::filesystem::path& config, std::ostream& out, std::ostream& err);

}  // namespace smora::cli

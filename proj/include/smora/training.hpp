// Copyright (c) 2026, The SMoRA Authors
// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale multi-task regression: a synthetic task family sharing one
// frozen base, a minibatch trainer with per-step bias balancing, evaluation,
// and the granularity / activated-rank ablations.

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "smora/model.hpp"

namespace smora {

struct TaskSuiteSpec {
    std::size_t tasks = 8;
    std::size_t d_in = 32;
    std::size_t d_out = 32;
    std::size_t delta_rank = 4;  // rank of every task delta U_m V_m
    double shared_fraction = 0.25;  // round(f * delta_rank) factor columns shared by all tasks
    std::size_t train_per_task = 256;
    std::size_t eval_per_task = 128;
    double center_scale = 4.0;  // norm of each task's input center
    double input_std = 0.5;
    double delta_scale = 1.0;
    double noise_std = 0.01;

    void validate() const;
    bool operator==(const TaskSuiteSpec&) const = default;
};

nlohmann::json to_json(const TaskSuiteSpec& spec);
TaskSuiteSpec suite_spec_from_json(const nlohmann::json& j);

struct TaskSuite {
    TaskSuiteSpec spec;
    Matrix w0;                   // (d_out x d_in) shared frozen base
    std::vector<Matrix> deltas;  // per-task (d_out x d_in)
    std::vector<Vector> centers;
    Matrix train_x, train_y;
    std::vector<std::size_t> train_task;
    Matrix eval_x, eval_y;
    std::vector<std::size_t> eval_task;
};

/// Deterministic per (spec, rng state).
TaskSuite gen_multitask_data(const TaskSuiteSpec& spec, Rng& rng);

enum class Optimizer { sgd, adam };

struct TrainConfig {
    AdapterSpec adapter;
    Optimizer optimizer = Optimizer::sgd;
    double lr = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t steps = 1000;
    std::size_t batch = 32;
    std::uint64_t seed = 0;
    bool balancing = true;
    /// Router rows [0, skew_experts) are shifted by `router_skew` along the
    /// mean training input, so they win the top-k for almost every token.
    double router_skew = 0.0;
    std::size_t skew_experts = 0;
    std::size_t threads = 1;
    /// Record the full per-rank counts every step (MaxVio is always kept).
    bool record_counts = false;

    void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct EvalResult {
    std::vector<double> per_task_mse;
    double avg_mse = 0.0;
};

struct RunMetrics {
    std::vector<double> loss;  // per step
    std::vector<double> max_vio;  // per step, routed adapters only
    std::vector<std::vector<std::uint64_t>> counts;  // per step when recorded
    std::vector<std::uint64_t> final_counts;         // last step's per-expert loads
    EvalResult eval;
    /// Routing over the whole eval split after training (routed adapters).
    std::vector<std::uint64_t> eval_counts;
    double eval_max_vio = 0.0;
};

nlohmann::json to_json(const RunMetrics& metrics);

struct TrainResult {
    Model model;
    RunMetrics metrics;
};

/// Trains a fresh adapter over suite.w0. Throws NumericError when the loss
/// stops being finite.
TrainResult train_adapter(const TaskSuite& suite, const TrainConfig& config);

/// Continues training an existing model in place.
RunMetrics train_model(Model& model, const TaskSuite& suite, const TrainConfig& config);

/// Per-task mean squared error on the held-out split (mean over samples and
/// d_out), and the macro average over tasks.
EvalResult evaluate(const Model& model, const TaskSuite& suite);
EvalResult evaluate(const Model& model, const Matrix& x, const Matrix& y, const std::vector<std::size_t>& task,
                    std::size_t tasks);

/// Routing decisions of a SMoRA model on every row of x.
std::vector<GateDecision> route_all(const SmoraLayer& layer, const Matrix& x);

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct GranularityConfig {
    std::size_t expert_rank = 0;
    std::size_t expert_count = 0;
    std::size_t activate_count = 0;
    bool operator==(const GranularityConfig&) const = default;
};

/// All (e, n, a) with e n = r_total, e a = r_active, a <= n, coarsest first.
std::vector<GranularityConfig> granularity_configs(std::size_t r_total, std::size_t r_active);

struct SweepRow {
    GranularityConfig config;
    std::uint64_t seed = 0;
    double avg_mse = 0.0;
};

/// Trains a block-routed SMoRA (block = expert rank, which is a top-k
/// multi-LoRA MoE with equal expert ranks) for every config and seed. The
/// suite for seed s is generated from s; the adapter fields of `base`
/// other than kind/rank/k/block are kept. Runs execute in parallel.
std::vector<SweepRow> granularity_sweep(std::size_t r_total, std::size_t r_active, const TaskSuiteSpec& suite_spec,
                                        const TrainConfig& base, const std::vector<std::uint64_t>& seeds,
                                        std::size_t threads = 1);

void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows);

struct AblationRow {
    std::string method;  // "smora" or "lora"
    std::size_t k = 0;   // activated ranks (smora) or rank (lora)
    std::uint64_t seed = 0;
    double avg_mse = 0.0;
};

/// SMoRA(r_total, k) and LoRA(rank k) for every k and seed, sorted by
/// (k, method, seed).
std::vector<AblationRow> rank_ablation(std::size_t r_total, const std::vector<std::size_t>& k_values,
                                       const TaskSuiteSpec& suite_spec, const TrainConfig& base,
                                       const std::vector<std::uint64_t>& seeds, std::size_t threads = 1);

void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows);

}  // namespace smora

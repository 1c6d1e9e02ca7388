// Copyright (c) 2026, The SMoRA Authors
// SPDX-License-Identifier: Apache-2.0
//
// Diagnostics exported as data: rank-similarity Gram matrices, per-task
// routing histograms and load-balance traces.

#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <utility>
#include <vector>

#include "smora/model.hpp"
#include "smora/routing.hpp"
#include "smora/training.hpp"

namespace smora {

/// C = [A | B^T] [A | B^T]^T for A (r x d_in) and B (d_out x r). With
/// `cosine` every row of [A | B^T] is normalised first (zero rows stay zero).
Matrix rank_similarity(const Matrix& a, const Matrix& b, bool cosine = false);

/// mean |diag| / mean |off-diag|; needs at least two ranks.
double diagonal_dominance(const Matrix& c);

/// Rank-space factors of any adapter: (A, B) for LoRA and SMoRA, the stacked
/// expert factors for MoE and SMEAR, (A, mean_i B_i) for HydraLoRA and
/// (A, B W) for MoSLoRA.
std::pair<Matrix, Matrix> adapter_factors(const Model& model);

struct RoutingDistribution {
    Matrix frequency;        // (tasks x experts), each row sums to 1
    Matrix selection_rate;   // (tasks x experts), share of the task's tokens routed to each expert
    Matrix task_similarity;  // (tasks x tasks) cosine between frequency rows
    std::vector<std::size_t> tokens;  // per task
};

RoutingDistribution routing_distribution(std::span<const GateDecision> decisions, std::span<const std::size_t> labels,
                                         std::size_t tasks, std::size_t experts);

struct LoadTrace {
    std::vector<double> max_vio;  // per step
    Vector normalized_loads;      // final-step loads divided by their mean
};

LoadTrace load_trace(const RunMetrics& metrics);

/// r rows x r columns, no header.
void write_similarity_csv(std::ostream& os, const Matrix& c);
/// task,rank,frequency
void write_histogram_csv(std::ostream& os, const RoutingDistribution& dist);
/// step,max_vio
void write_load_trace_csv(std::ostream& os, const LoadTrace& trace);

}  // namespace smora

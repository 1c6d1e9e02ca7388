// Copyright (c) 2026, The SMoRA Authors
// SPDX-License-Identifier: Apache-2.0
//
// Multi-LoRA MoE <-> single blockwise-gated LoRA. Stacking the expert A_i
// along the rank axis and the B_i along the column axis, and repeating each
// expert gate over its r_i ranks, reproduces the MoE output exactly:
//
//   W0 x + sum_i g_i B_i A_i x == W0 x + B~ diag(g_1 I_r1, ..., g_n I_rn) A~ x
//
// A~ is (R x d_in) and B~ is (d_out x R) with R = sum_i r_i, matching the
// A: d_in -> r, B: r -> d_out orientation used everywhere else.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "smora/adapter.hpp"

namespace smora {

struct BlockwiseLora {
    Matrix a_tilde;  // (R x d_in)
    Matrix b_tilde;  // (d_out x R)
    std::vector<std::size_t> block_ranks;
    double scaling = 1.0;

    [[nodiscard]] std::size_t total_rank() const noexcept { return a_tilde.rows(); }
};

BlockwiseLora concat_experts(std::span<const LoraParams> experts);
std::vector<LoraParams> split_experts(const BlockwiseLora& blockwise);

/// Repeats gate i r_i times.
Vector expand_gates(std::span<const double> gates, std::span<const std::size_t> block_ranks);

/// W0 x + s * B~ G A~ x with an explicit diagonal G.
Vector blockwise_forward(const Matrix& w0, const BlockwiseLora& blockwise, std::span<const double> rank_gates,
                         std::span<const double> x);

/// max |LHS - RHS| of the identity above; the left side is evaluated per
/// expert, the right side through the stacked form, with no shared
/// intermediates.
double check_equivalence(std::span<const LoraParams> experts, std::span<const double> gates, const Matrix& w0,
                         std::span<const double> x);

struct EquivalenceSuiteConfig {
    std::size_t trials = 1000;
    std::size_t max_n = 8;
    std::size_t max_rank = 8;
    std::size_t max_dim = 32;
    std::uint64_t seed = 0;
    double tolerance = 1e-10;

    void validate() const;
};

struct EquivalenceReport {
    std::size_t trials = 0;
    double max_diff = 0.0;
    bool passed = false;
};

/// Random instances with heterogeneous ranks and soft, hard top-k and
/// partially zero gates.
EquivalenceReport run_equivalence_suite(const EquivalenceSuiteConfig& config);

}  // namespace smora

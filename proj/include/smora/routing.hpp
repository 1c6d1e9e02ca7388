// Copyright (c) 2026, The SMoRA Authors
// SPDX-License-Identifier: Apache-2.0
//
// Rank router: biased top-k selection, softmax weighting over the retained
// scores, loss-free bias balancing and per-rank load statistics.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "smora/numerics.hpp"

namespace smora {

/// Default bias update rate used for full-size adapters.
inline constexpr double kDefaultUpdateRate = 1e-5;

struct RouterParams {
    Matrix w_g;   // (experts x d_in), trainable
    Vector bias;  // (experts), balancing only, never receives gradients
    double update_rate = kDefaultUpdateRate;

    [[nodiscard]] std::size_t experts() const noexcept { return w_g.rows(); }
    [[nodiscard]] std::size_t d_in() const noexcept { return w_g.cols(); }

    /// Kaiming router weights, zero bias.
    static RouterParams init(std::size_t experts, std::size_t d_in, Rng& rng,
                             double update_rate = kDefaultUpdateRate);
    void validate() const;
};

struct GateDecision {
    std::vector<std::size_t> indices;  // strictly increasing
    Vector weights;                    // softmax over the retained scores
    Vector logits;                     // the scores the softmax was taken over
};

/// Selects the top-k experts by W_g x + b. Weights are the softmax of the
/// retained unbiased scores W_g x, or of the biased scores when
/// `bias_in_weights` is set.
GateDecision gate(const RouterParams& router, std::span<const double> x, std::size_t k,
                  bool bias_in_weights = false);

/// Same as `gate` for precomputed unbiased scores (W_g x).
GateDecision gate_from_scores(std::span<const double> scores, std::span<const double> bias, std::size_t k,
                              bool bias_in_weights = false);

struct RoutingStats {
    std::vector<std::uint64_t> counts;
    std::uint64_t total_tokens = 0;
    std::size_t k = 0;

    explicit RoutingStats(std::size_t experts = 0, std::size_t k = 0) : counts(experts, 0), k(k) {}

    void record(const GateDecision& d);
    void merge(const RoutingStats& other);
    void reset();
    [[nodiscard]] double mean_load() const;

    bool operator==(const RoutingStats&) const = default;
};

RoutingStats accumulate_stats(std::span<const GateDecision> decisions, std::size_t experts);

/// b_i += u * sign(mean(c) - c_i); returns the updated bias.
Vector update_bias(RouterParams& router, const RoutingStats& stats);

/// (max_i c_i - mean) / mean.
double max_vio(const RoutingStats& stats);

nlohmann::json to_json(const RoutingStats& stats);

}  // namespace smora

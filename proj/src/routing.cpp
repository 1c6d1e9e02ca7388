// Copyright (c) 2026, The SMoRA Authors
// SPDX-License-Identifier: Apache-2.0

#include "smora/routing.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

namespace smora {

RouterParams RouterParams::init(std::size_t experts, std::size_t d_in, Rng& rng, double update_rate) {
    RouterParams p;
    p.w_g = kaiming_init(experts, d_in, rng);
    p.bias.assign(experts, 0.0);
    p.update_rate = update_rate;
    return p;
}

void RouterParams::validate() const {
    if (w_g.rows() == 0 || w_g.cols() == 0) throw std::invalid_argument("router: empty w_g");
    if (bias.size() != w_g.rows()) throw std::invalid_argument("router: bias length does not match w_g rows");
    if (!all_finite(bias)) throw std::invalid_argument("router: non-finite bias");
    if (!(update_rate > 0.0)) throw std::invalid_argument("router: update_rate must be positive");
}

GateDecision gate_from_scores(std::span<const double> scores, std::span<const double> bias, std::size_t k,
                              bool bias_in_weights) {
    if (bias.size() != scores.size()) throw std::invalid_argument("gate: bias length mismatch");
    if (k < 1 || k > scores.size()) {
        throw std::invalid_argument("gate: k=" + std::to_string(k) + " out of range [1, " +
                                    std::to_string(scores.size()) + "]");
    }
    Vector biased(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) biased[i] = scores[i] + bias[i];

    GateDecision d;
    d.indices = top_k_indices(biased, k);
    d.logits.resize(k);
    for (std::size_t j = 0; j < k; ++j) {
        const std::size_t e = d.indices[j];
        d.logits[j] = bias_in_weights ? biased[e] : scores[e];
    }
    d.weights = softmax(d.logits);
    return d;
}

GateDecision gate(const RouterParams& router, std::span<const double> x, std::size_t k, bool bias_in_weights) {
    if (x.size() != router.d_in()) throw std::invalid_argument("gate: input length does not match router d_in");
    if (!all_finite(x)) throw std::invalid_argument("gate: non-finite input");
    const Vector scores = matvec(router.w_g, x);
    return gate_from_scores(scores, router.bias, k, bias_in_weights);
}

void RoutingStats::record(const GateDecision& d) {
    if (k == 0) k = d.indices.size();
    if (d.indices.size() != k) throw std::invalid_argument("routing stats: decision k differs from accumulated k");
    for (std::size_t e : d.indices) {
        if (e >= counts.size()) {
            throw std::invalid_argument("routing stats: index " + std::to_string(e) + " >= experts " +
                                        std::to_string(counts.size()));
        }
    }
    for (std::size_t e : d.indices) ++counts[e];
    ++total_tokens;
}

void RoutingStats::merge(const RoutingStats& other) {
    if (other.counts.size() != counts.size()) throw std::invalid_argument("routing stats: expert count mismatch");
    if (other.total_tokens == 0) return;
    if (total_tokens == 0) {
        k = other.k;
    } else if (other.k != k) {
        throw std::invalid_argument("routing stats: k mismatch in merge");
    }
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
    total_tokens += other.total_tokens;
}

void RoutingStats::reset() {
    std::fill(counts.begin(), counts.end(), 0);
    total_tokens = 0;
}

double RoutingStats::mean_load() const {
    if (counts.empty()) return 0.0;
    double s = 0.0;
    for (auto c : counts) s += static_cast<double>(c);
    return s / static_cast<double>(counts.size());
}

RoutingStats accumulate_stats(std::span<const GateDecision> decisions, std::size_t experts) {
    RoutingStats s(experts, decisions.empty() ? 0 : decisions.front().indices.size());
    for (const auto& d : decisions) s.record(d);
    return s;
}

Vector update_bias(RouterParams& router, const RoutingStats& stats) {
    if (stats.counts.empty()) throw std::invalid_argument("update_bias: empty stats");
    if (stats.counts.size() != router.bias.size()) throw std::invalid_argument("update_bias: stats size != experts");
    const double mean = stats.mean_load();
    for (std::size_t i = 0; i < router.bias.size(); ++i) {
        const double e = mean - static_cast<double>(stats.counts[i]);
        if (e > 0.0) {
            router.bias[i] += router.update_rate;
        } else if (e < 0.0) {
            router.bias[i] -= router.update_rate;
        }
    }
    return router.bias;
}

double max_vio(const RoutingStats& stats) {
    if (stats.total_tokens == 0 || stats.counts.empty()) throw std::invalid_argument("max_vio: no tokens recorded");
    const double mean = stats.mean_load();
    const double mx = static_cast<double>(*std::max_element(stats.counts.begin(), stats.counts.end()));
    return (mx - mean) / mean;
}

nlohmann::json to_json(const RoutingStats& stats) {
    nlohmann::json j;
    j["counts"] = stats.counts;
    j["total_tokens"] = stats.total_tokens;
    j["k"] = stats.k;
    j["max_vio"] = stats.total_tokens ? max_vio(stats) : 0.0;
    return j;
}

}  // namespace smora

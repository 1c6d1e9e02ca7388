// Copyright (c) 2026, The SMoRA Authors
// SPDX-License-Identifier: Apache-2.0

#include "smora/equivalence.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace smora {

BlockwiseLora concat_experts(std::span<const LoraParams> experts) {
    if (experts.empty()) throw std::invalid_argument("concat_experts: no experts");
    const std::size_t d_in = experts.front().d_in(), d_out = experts.front().d_out();
    std::size_t total = 0;
    for (const auto& e : experts) {
        e.validate();
        if (e.d_in() != d_in || e.d_out() != d_out)
            throw std::invalid_argument("concat_experts: experts must share d_in and d_out");
        if (e.scaling != experts.front().scaling)
            throw std::invalid_argument("concat_experts: experts must share the scaling factor");
        total += e.rank();
    }
    BlockwiseLora bw{Matrix(total, d_in), Matrix(d_out, total), {}, experts.front().scaling};
    std::size_t offset = 0;
    for (const auto& e : experts) {
        for (std::size_t q = 0; q < e.rank(); ++q) {
            std::copy(e.a.row(q).begin(), e.a.row(q).end(), bw.a_tilde.row(offset + q).begin());
            for (std::size_t o = 0; o < d_out; ++o) bw.b_tilde(o, offset + q) = e.b(o, q);
        }
        bw.block_ranks.push_back(e.rank());
        offset += e.rank();
    }
    return bw;
}

std::vector<LoraParams> split_experts(const BlockwiseLora& bw) {
    std::size_t total = 0;
    for (auto r : bw.block_ranks) total += r;
    if (total != bw.a_tilde.rows() || total != bw.b_tilde.cols())
        throw std::invalid_argument("split_experts: block ranks do not sum to the stacked rank");
    std::vector<LoraParams> out;
    std::size_t offset = 0;
    for (auto r : bw.block_ranks) {
        LoraParams e{Matrix(r, bw.a_tilde.cols()), Matrix(bw.b_tilde.rows(), r), bw.scaling};
        for (std::size_t q = 0; q < r; ++q) {
            std::copy(bw.a_tilde.row(offset + q).begin(), bw.a_tilde.row(offset + q).end(), e.a.row(q).begin());
            for (std::size_t o = 0; o < e.b.rows(); ++o) e.b(o, q) = bw.b_tilde(o, offset + q);
        }
        out.push_back(std::move(e));
        offset += r;
    }
    return out;
}

Vector expand_gates(std::span<const double> gates, std::span<const std::size_t> block_ranks) {
    if (gates.size() != block_ranks.size())
        throw std::invalid_argument("expand_gates: one gate per block required");
    Vector out;
    for (std::size_t i = 0; i < gates.size(); ++i) out.insert(out.end(), block_ranks[i], gates[i]);
    return out;
}

Vector blockwise_forward(const Matrix& w0, const BlockwiseLora& bw, std::span<const double> rank_gates,
                         std::span<const double> x) {
    const std::size_t big_r = bw.total_rank();
    if (rank_gates.size() != big_r) throw std::invalid_argument("blockwise_forward: need one gate per rank");
    if (x.size() != bw.a_tilde.cols() || w0.cols() != x.size() || w0.rows() != bw.b_tilde.rows())
        throw std::invalid_argument("blockwise_forward: shape mismatch");
    Matrix g(big_r, big_r);
    for (std::size_t i = 0; i < big_r; ++i) g(i, i) = rank_gates[i];
    const Matrix xcol(x.size(), 1, Vector(x.begin(), x.end()));
    const Matrix delta = dense_matmul(bw.b_tilde, dense_matmul(g, dense_matmul(bw.a_tilde, xcol)));
    const Matrix base = dense_matmul(w0, xcol);
    Vector y(w0.rows());
    for (std::size_t o = 0; o < y.size(); ++o) y[o] = base(o, 0) + bw.scaling * delta(o, 0);
    return y;
}

double check_equivalence(std::span<const LoraParams> experts, std::span<const double> gates, const Matrix& w0,
                         std::span<const double> x) {
    if (gates.size() != experts.size()) throw std::invalid_argument("check_equivalence: one gate per expert required");
    for (double g : gates)
        if (!(g >= 0.0 && g <= 1.0)) throw std::invalid_argument("check_equivalence: gates must lie in [0, 1]");
    if (experts.empty()) throw std::invalid_argument("check_equivalence: no experts");
    if (w0.rows() != experts.front().d_out() || w0.cols() != experts.front().d_in() || x.size() != w0.cols())
        throw std::invalid_argument("check_equivalence: shape mismatch");

    // Left: per-expert products.
    Vector lhs = matvec(w0, x);
    for (std::size_t i = 0; i < experts.size(); ++i) {
        const auto& e = experts[i];
        const Vector u = matvec(e.b, matvec(e.a, x));
        axpy(gates[i] * e.scaling, u, lhs);
    }
    // Right: stacked factors with the expanded diagonal gate.
    const BlockwiseLora bw = concat_experts(experts);
    const Vector rhs = blockwise_forward(w0, bw, expand_gates(gates, bw.block_ranks), x);
    return max_abs_diff(lhs, rhs);
}

void EquivalenceSuiteConfig::validate() const {
    if (trials == 0 || max_n == 0 || max_rank == 0 || max_dim == 0)
        throw std::invalid_argument("equivalence suite: trials, max_n, max_rank and max_dim must be positive");
    if (!(tolerance > 0.0)) throw std::invalid_argument("equivalence suite: tolerance must be positive");
}

EquivalenceReport run_equivalence_suite(const EquivalenceSuiteConfig& cfg) {
    cfg.validate();
    EquivalenceReport rep;
    const Rng root(cfg.seed);
    for (std::size_t trial = 0; trial < cfg.trials; ++trial) {
        Rng rng = root.child(trial);
        const std::size_t n = 1 + rng.below(cfg.max_n);
        const std::size_t d_in = 1 + rng.below(cfg.max_dim);
        const std::size_t d_out = 1 + rng.below(cfg.max_dim);
        std::vector<LoraParams> experts;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t r = 1 + rng.below(cfg.max_rank);
            experts.push_back({normal_init(r, d_in, 1.0, rng), normal_init(d_out, r, 1.0, rng), 1.0});
        }
        const Matrix w0 = normal_init(d_out, d_in, 1.0, rng);
        Vector x(d_in);
        for (double& v : x) v = rng.normal();

        Vector scores(n);
        for (double& v : scores) v = rng.normal();
        Vector gates;
        switch (trial % 3) {
            case 0:  // soft
                gates = softmax(scores);
                break;
            case 1: {  // hard top-m
                const std::size_t m = 1 + rng.below(n);
                const auto sel = top_k_indices(scores, m);
                Vector kept;
                for (auto i : sel) kept.push_back(scores[i]);
                const Vector w = softmax(kept);
                gates.assign(n, 0.0);
                for (std::size_t j = 0; j < sel.size(); ++j) gates[sel[j]] = w[j];
                break;
            }
            default:  // arbitrary gates in [0, 1] with some exact zeros
                gates.resize(n);
                for (double& g : gates) g = rng.uniform() < 0.3 ? 0.0 : rng.uniform();
                break;
        }
        rep.max_diff = std::max(rep.max_diff, check_equivalence(experts, gates, w0, x));
        ++rep.trials;
    }
    rep.passed = rep.max_diff <= cfg.tolerance;
    return rep;
}

}  // namespace smora

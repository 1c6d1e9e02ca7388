// Copyright (c) 2026, The SMoRA Authors
// SPDX-License-Identifier: Apache-2.0
//
// Vanilla LoRA and the rank-routed SMoRA layer with exact manual backward.
//
// A SMoRA layer treats every rank of a single LoRA pair (A, B) as an
// expert: y = W0 x + s * B G(x) A x, where G(x) is diagonal and nonzero only
// on the top-k routed ranks. With `block > 1` the router selects contiguous
// blocks of `block` ranks instead, which is exactly a top-k multi-LoRA MoE
// with equal expert ranks written in blockwise form.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "smora/numerics.hpp"
#include "smora/routing.hpp"

namespace smora {

struct LoraParams {
    Matrix a;  // (r x d_in)
    Matrix b;  // (d_out x r)
    double scaling = 1.0;

    [[nodiscard]] std::size_t rank() const noexcept { return a.rows(); }
    [[nodiscard]] std::size_t d_in() const noexcept { return a.cols(); }
    [[nodiscard]] std::size_t d_out() const noexcept { return b.rows(); }

    /// Kaiming A, zero B, so the initial update B A is exactly zero.
    static LoraParams init(std::size_t rank, std::size_t d_in, std::size_t d_out, Rng& rng, double scaling = 1.0);
    void validate() const;
};

/// y = w0 x + scaling * B (A x)
Vector lora_forward(const Matrix& w0, const LoraParams& lora, std::span<const double> x);

struct LoraCache {
    Vector x;
    Vector h;  // A x
};

struct LoraGrads {
    Matrix d_a;
    Matrix d_b;
    Vector d_x;
};

LoraCache lora_cache(const LoraParams& lora, std::span<const double> x);
LoraGrads lora_backward(const Matrix& w0, const LoraParams& lora, const LoraCache& cache, std::span<const double> dy);
/// Accumulates parameter gradients into `acc` and returns d_x.
Vector lora_backward_accumulate(const Matrix& w0, const LoraParams& lora, const LoraCache& cache,
                                std::span<const double> dy, LoraGrads& acc);

struct SmoraLayer {
    Matrix w0;  // (d_out x d_in), frozen
    LoraParams lora;
    RouterParams router;  // one row per expert (rank / block)
    std::size_t k = 1;
    std::size_t block = 1;
    bool bias_in_weights = false;

    [[nodiscard]] std::size_t rank() const noexcept { return lora.rank(); }
    [[nodiscard]] std::size_t experts() const noexcept { return router.experts(); }
    [[nodiscard]] std::size_t d_in() const noexcept { return w0.cols(); }
    [[nodiscard]] std::size_t d_out() const noexcept { return w0.rows(); }

    static SmoraLayer init(Matrix w0, std::size_t rank, std::size_t k, Rng& rng, std::size_t block = 1,
                           double update_rate = kDefaultUpdateRate);
    void validate() const;
};

struct SmoraCache {
    Vector x;
    GateDecision decision;
    Vector h;        // A[selected ranks] x, k * block entries in selection order
    Vector h_gated;  // g ⊙ h, gate repeated over each block
};

struct SmoraForward {
    Vector y;
    SmoraCache cache;
};

SmoraForward smora_forward(const SmoraLayer& layer, std::span<const double> x);

/// Forward with G forced to the identity (every rank active, weight 1).
Vector smora_forward_gate_bypassed(const SmoraLayer& layer, std::span<const double> x);

/// Reference: materialises the full diagonal G(x) and evaluates
/// w0 x + s * B G A x with dense products.
Vector smora_forward_dense_oracle(const SmoraLayer& layer, std::span<const double> x);

/// Batched forward over the rows of `x` (t x d_in) using the indexed
/// kernels; returns (t x d_out). Requires block == 1.
Matrix smora_forward_batch(const SmoraLayer& layer, const Matrix& x, std::size_t threads = 1);

struct SmoraGrads {
    Matrix d_a;   // rows of never-selected ranks stay exactly zero
    Matrix d_b;   // columns of never-selected ranks stay exactly zero
    Matrix d_wg;
    Vector d_x;

    static SmoraGrads zeros(const SmoraLayer& layer);
};

SmoraGrads smora_backward(const SmoraLayer& layer, const SmoraCache& cache, std::span<const double> dy);

/// Adds this token's parameter gradients into `acc` (d_x is returned, not
/// accumulated).
Vector smora_backward_accumulate(const SmoraLayer& layer, const SmoraCache& cache, std::span<const double> dy,
                                 SmoraGrads& acc);

struct ParamCount {
    std::size_t total = 0;
    std::size_t trainable = 0;
    std::size_t active_per_token = 0;
    /// Adapter factor parameters touched per token, router excluded.
    std::size_t active_adapter = 0;
    std::size_t router = 0;
};

ParamCount count_params(const LoraParams& lora);
ParamCount count_params(const SmoraLayer& layer);

}  // namespace smora

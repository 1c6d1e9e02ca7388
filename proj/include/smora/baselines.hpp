// Copyright (c) 2026, The SMoRA Authors
// SPDX-License-Identifier: Apache-2.0
//
// Comparison adapters: multi-LoRA MoE (soft, Gumbel top-1, top-k), SMEAR
// parameter merging, HydraLoRA (shared A, several B) and MoSLoRA (trainable
// r x r mixer). Each has a forward, a manual backward that accumulates into
// a gradient struct, and a parameter count.

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "smora/adapter.hpp"
#include "smora/numerics.hpp"

namespace smora {

enum class GateMode { soft, gumbel_top1, topk };

std::string_view to_string(GateMode mode);
GateMode parse_gate_mode(std::string_view name);

struct MoeLoraParams {
    std::vector<LoraParams> experts;
    Matrix router;  // (n x d_in)
    GateMode mode = GateMode::soft;
    double tau = 1.0;       // Gumbel temperature
    std::size_t top_m = 1;  // experts kept in topk mode
    /// Gumbel mode only: route to the argmax expert with weight 1 instead of
    /// sampling the relaxation.
    bool hard = false;

    [[nodiscard]] std::size_t n() const noexcept { return experts.size(); }
    [[nodiscard]] std::size_t d_in() const noexcept { return router.cols(); }
    [[nodiscard]] std::size_t d_out() const noexcept { return experts.empty() ? 0 : experts.front().d_out(); }

    /// n experts of rank r; Kaiming A and router, zero B.
    static MoeLoraParams init(std::size_t n, std::size_t rank, std::size_t d_in, std::size_t d_out, GateMode mode,
                              Rng& rng);
    void validate() const;
};

struct MoeCache {
    Vector x;
    std::vector<std::size_t> active;  // experts that received nonzero weight slots
    Vector weights;                   // gate weight per active expert
    Vector logits;                    // router scores of the active experts (pre-softmax)
    Vector noise;                     // Gumbel noise per expert when sampled
    std::vector<Vector> h;            // A_i x per active expert
    std::vector<Vector> u;            // B_i h_i per active expert (unscaled)
    bool relaxed = false;
};

struct MoeForward {
    Vector y;
    MoeCache cache;
};

/// y = w0 x + sum_i g_i(x) * s_i * B_i A_i x. `rng` drives the Gumbel noise
/// and is required in relaxed Gumbel mode.
MoeForward moe_forward(const Matrix& w0, const MoeLoraParams& p, std::span<const double> x, Rng* rng = nullptr);

/// Relaxed top-1 gate: softmax((log G_i + g_i) / tau), g_i ~ Gumbel(0, 1).
/// `probs` must be a probability vector.
Vector gumbel_gate(std::span<const double> probs, double tau, Rng& rng);

struct MoeGrads {
    std::vector<Matrix> d_a;
    std::vector<Matrix> d_b;
    Matrix d_router;
    Vector d_x;

    static MoeGrads zeros(const MoeLoraParams& p);
};

Vector moe_backward_accumulate(const Matrix& w0, const MoeLoraParams& p, const MoeCache& cache,
                               std::span<const double> dy, MoeGrads& acc);

/// Gate-weighted sum of expert parameters (A and B separately). Gates must
/// form a probability vector.
LoraParams smear_merge(std::span<const LoraParams> experts, std::span<const double> gates);
/// Same combination without the probability constraint.
LoraParams smear_combine(std::span<const LoraParams> experts, std::span<const double> gates);

struct SmearParams {
    std::vector<LoraParams> experts;
    Matrix router;  // (n x d_in)

    static SmearParams init(std::size_t n, std::size_t rank, std::size_t d_in, std::size_t d_out, Rng& rng);
    void validate() const;
};

struct SmearCache {
    Vector x;
    Vector gates;
    LoraParams merged;
    Vector h;  // merged A x
};

struct SmearForward {
    Vector y;
    SmearCache cache;
};

SmearForward smear_forward(const Matrix& w0, const SmearParams& p, std::span<const double> x);

struct SmearGrads {
    std::vector<Matrix> d_a;
    std::vector<Matrix> d_b;
    Matrix d_router;
    Vector d_x;

    static SmearGrads zeros(const SmearParams& p);
};

Vector smear_backward_accumulate(const Matrix& w0, const SmearParams& p, const SmearCache& cache,
                                 std::span<const double> dy, SmearGrads& acc);

struct HydraParams {
    Matrix shared_a;         // (r x d_in)
    std::vector<Matrix> bs;  // N x (d_out x r)
    Matrix router;           // (N x d_in)
    double scaling = 1.0;

    static HydraParams init(std::size_t heads, std::size_t rank, std::size_t d_in, std::size_t d_out, Rng& rng);
    void validate() const;
};

struct HydraCache {
    Vector x;
    Vector h;  // shared A x
    Vector gates;
    std::vector<Vector> u;  // B_i h
};

struct HydraForward {
    Vector y;
    HydraCache cache;
};

HydraForward hydra_forward(const Matrix& w0, const HydraParams& p, std::span<const double> x);

struct HydraGrads {
    Matrix d_a;
    std::vector<Matrix> d_bs;
    Matrix d_router;
    Vector d_x;

    static HydraGrads zeros(const HydraParams& p);
};

Vector hydra_backward_accumulate(const Matrix& w0, const HydraParams& p, const HydraCache& cache,
                                 std::span<const double> dy, HydraGrads& acc);

struct MosloraParams {
    LoraParams lora;
    Matrix mixer;  // (r x r)

    /// Kaiming A and mixer, zero B.
    static MosloraParams init(std::size_t rank, std::size_t d_in, std::size_t d_out, Rng& rng);
    void validate() const;
};

struct MosloraCache {
    Vector x;
    Vector h;  // A x
    Vector m;  // mixer h
};

struct MosloraForward {
    Vector y;
    MosloraCache cache;
};

/// y = w0 x + s * B (W (A x))
MosloraForward moslora_forward(const Matrix& w0, const MosloraParams& p, std::span<const double> x);

struct MosloraGrads {
    Matrix d_a;
    Matrix d_b;
    Matrix d_mixer;
    Vector d_x;

    static MosloraGrads zeros(const MosloraParams& p);
};

Vector moslora_backward_accumulate(const Matrix& w0, const MosloraParams& p, const MosloraCache& cache,
                                   std::span<const double> dy, MosloraGrads& acc);

ParamCount count_params(const MoeLoraParams& p);
ParamCount count_params(const SmearParams& p);
ParamCount count_params(const HydraParams& p);
ParamCount count_params(const MosloraParams& p);

}  // namespace smora

// Copyright (c) 2026, The SMoRA Authors
// SPDX-License-Identifier: Apache-2.0
//
// One adapted linear layer of any kind behind a single value type, plus the
// batched loss/gradient evaluation the trainer drives.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "smora/adapter.hpp"
#include "smora/baselines.hpp"
#include "smora/routing.hpp"

namespace smora {

enum class AdapterKind { lora, smora, moe, smear, hydra, moslora };

std::string_view to_string(AdapterKind kind);
AdapterKind parse_adapter_kind(std::string_view name);

struct AdapterSpec {
    AdapterKind kind = AdapterKind::smora;
    /// Total rank for lora, smora, moslora and hydra; per-expert rank for
    /// moe and smear.
    std::size_t rank = 64;
    std::size_t k = 8;        // smora: experts (blocks) activated per token
    std::size_t block = 1;    // smora: ranks per routed block
    std::size_t experts = 8;  // moe / smear experts, hydra B heads
    GateMode mode = GateMode::soft;
    double tau = 1.0;
    std::size_t top_m = 1;
    double scaling = 1.0;
    double update_rate = kDefaultUpdateRate;
    bool bias_in_weights = false;

    void validate() const;
    bool operator==(const AdapterSpec&) const = default;
};

nlohmann::json to_json(const AdapterSpec& spec);
/// Missing keys keep their defaults; unknown keys are rejected.
AdapterSpec adapter_spec_from_json(const nlohmann::json& j);

struct LoraModel {
    Matrix w0;
    LoraParams lora;
};
struct MoeModel {
    Matrix w0;
    MoeLoraParams params;
};
struct SmearModel {
    Matrix w0;
    SmearParams params;
};
struct HydraModel {
    Matrix w0;
    HydraParams params;
};
struct MosloraModel {
    Matrix w0;
    MosloraParams params;
};

using LayerVariant = std::variant<LoraModel, SmoraLayer, MoeModel, SmearModel, HydraModel, MosloraModel>;

struct Model {
    AdapterSpec spec;
    LayerVariant layer;

    [[nodiscard]] const Matrix& w0() const;
    [[nodiscard]] std::size_t d_in() const { return w0().cols(); }
    [[nodiscard]] std::size_t d_out() const { return w0().rows(); }
};

/// Fresh adapter around a frozen base: Kaiming A / routers, zero B.
Model make_model(const AdapterSpec& spec, Matrix w0, Rng& rng);

/// Inference forward. Gumbel gating uses the hard argmax here.
Vector predict(const Model& model, std::span<const double> x);

struct TensorView {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::span<double> data;
    bool trainable = false;
};

/// Every stored tensor in a fixed order, the frozen base first. Trainable
/// tensors are the ones the optimizer updates.
std::vector<TensorView> tensors(Model& model);

struct ConstTensorView {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::span<const double> data;
    bool trainable = false;
};

std::vector<ConstTensorView> tensors(const Model& model);

ParamCount count_params(const Model& model);

struct BatchResult {
    double loss = 0.0;                 // mean squared error over the batch and d_out
    std::vector<Vector> grads;         // aligned with the trainable entries of tensors()
    RoutingStats stats;                // smora only; empty otherwise
    std::vector<GateDecision> decisions;  // smora only, when requested
};

/// Mean-squared-error loss and parameter gradients over the selected rows of
/// (x, y). `gumbel_seed` and `token_offset` fix the Gumbel noise of each
/// token independently of the thread count.
BatchResult batch_gradient(const Model& model, const Matrix& x, const Matrix& y, std::span<const std::size_t> rows,
                           std::uint64_t gumbel_seed, std::uint64_t token_offset, std::size_t threads = 1,
                           bool keep_decisions = false);

}  // namespace smora

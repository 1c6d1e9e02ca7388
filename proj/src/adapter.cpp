// Copyright (c) 2026, The SMoRA Authors
// SPDX-License-Identifier: Apache-2.0

#include "smora/adapter.hpp"

#include <stdexcept>
#include <string>

#include "smora/indexed_kernel.hpp"

namespace smora {

LoraParams LoraParams::init(std::size_t rank, std::size_t d_in, std::size_t d_out, Rng& rng, double scaling) {
    if (rank == 0) throw std::invalid_argument("lora: rank must be >= 1");
    LoraParams p;
    p.a = kaiming_init(rank, d_in, rng);
    p.b = Matrix(d_out, rank);
    p.scaling = scaling;
    return p;
}

void LoraParams::validate() const {
    if (a.rows() == 0) throw std::invalid_argument("lora: rank must be >= 1");
    if (a.cols() == 0 || b.rows() == 0) throw std::invalid_argument("lora: empty dimensions");
    if (b.cols() != a.rows()) {
        throw std::invalid_argument("lora: B has " + std::to_string(b.cols()) + " columns but A has " +
                                    std::to_string(a.rows()) + " rows");
    }
}

namespace {

void check_base(const Matrix& w0, const LoraParams& lora) {
    lora.validate();
    if (w0.rows() != lora.d_out() || w0.cols() != lora.d_in())
        throw std::invalid_argument("adapter: w0 shape does not match the LoRA factors");
}

// out += scaling * sum over listed ranks of coeff * B[:, rank]; ranks are
// visited in the given order.
void accumulate_columns(const Matrix& b, std::span<const std::size_t> ranks, std::span<const double> coeff,
                        double scaling, std::span<double> y) {
    const std::size_t r = b.cols();
    for (std::size_t o = 0; o < b.rows(); ++o) {
        const double* brow = b.data() + o * r;
        double acc = 0.0;
        for (std::size_t j = 0; j < ranks.size(); ++j) acc += coeff[j] * brow[ranks[j]];
        y[o] += scaling * acc;
    }
}

}  // namespace

Vector lora_forward(const Matrix& w0, const LoraParams& lora, std::span<const double> x) {
    check_base(w0, lora);
    if (x.size() != lora.d_in()) throw std::invalid_argument("lora_forward: input length mismatch");
    Vector y = matvec(w0, x);
    const Vector h = matvec(lora.a, x);
    const Vector delta = matvec(lora.b, h);
    for (std::size_t o = 0; o < y.size(); ++o) y[o] += lora.scaling * delta[o];
    return y;
}

LoraCache lora_cache(const LoraParams& lora, std::span<const double> x) {
    return {Vector(x.begin(), x.end()), matvec(lora.a, x)};
}

Vector lora_backward_accumulate(const Matrix& w0, const LoraParams& lora, const LoraCache& cache,
                                std::span<const double> dy, LoraGrads& acc) {
    if (dy.size() != lora.d_out() || cache.x.size() != lora.d_in() || cache.h.size() != lora.rank())
        throw std::invalid_argument("lora_backward: cache or dy shape mismatch");
    add_outer(acc.d_b, lora.scaling, dy, cache.h);
    Vector dh = matvec_t(lora.b, dy);
    for (double& v : dh) v *= lora.scaling;
    add_outer(acc.d_a, 1.0, dh, cache.x);
    Vector d_x = matvec_t(w0, dy);
    axpy(1.0, matvec_t(lora.a, dh), d_x);
    return d_x;
}

LoraGrads lora_backward(const Matrix& w0, const LoraParams& lora, const LoraCache& cache, std::span<const double> dy) {
    LoraGrads g{Matrix(lora.rank(), lora.d_in()), Matrix(lora.d_out(), lora.rank()), {}};
    g.d_x = lora_backward_accumulate(w0, lora, cache, dy, g);
    return g;
}

SmoraLayer SmoraLayer::init(Matrix w0, std::size_t rank, std::size_t k, Rng& rng, std::size_t block,
                            double update_rate) {
    if (block == 0 || rank % block != 0) throw std::invalid_argument("smora: rank must be a multiple of block");
    SmoraLayer layer;
    const std::size_t d_in = w0.cols(), d_out = w0.rows();
    layer.w0 = std::move(w0);
    Rng lora_rng = rng.child("lora");
    Rng router_rng = rng.child("router");
    layer.lora = LoraParams::init(rank, d_in, d_out, lora_rng);
    layer.router = RouterParams::init(rank / block, d_in, router_rng, update_rate);
    layer.k = k;
    layer.block = block;
    layer.validate();
    return layer;
}

void SmoraLayer::validate() const {
    check_base(w0, lora);
    router.validate();
    if (block == 0 || lora.rank() % block != 0) throw std::invalid_argument("smora: rank must be a multiple of block");
    if (router.experts() * block != lora.rank())
        throw std::invalid_argument("smora: router rows * block must equal the LoRA rank");
    if (router.d_in() != lora.d_in()) throw std::invalid_argument("smora: router d_in does not match the layer");
    if (k < 1 || k > router.experts()) {
        throw std::invalid_argument("smora: k=" + std::to_string(k) + " out of range [1, " +
                                    std::to_string(router.experts()) + "]");
    }
}

namespace {

// Ranks covered by the selected experts, in selection order.
std::vector<std::size_t> expand_selected(const SmoraLayer& layer, const GateDecision& d) {
    std::vector<std::size_t> ranks;
    ranks.reserve(d.indices.size() * layer.block);
    for (std::size_t e : d.indices)
        for (std::size_t q = 0; q < layer.block; ++q) ranks.push_back(e * layer.block + q);
    return ranks;
}

}  // namespace

SmoraForward smora_forward(const SmoraLayer& layer, std::span<const double> x) {
    layer.validate();
    if (x.size() != layer.d_in()) throw std::invalid_argument("smora_forward: input length mismatch");
    SmoraForward f;
    auto& c = f.cache;
    c.x.assign(x.begin(), x.end());
    c.decision = gate(layer.router, x, layer.k, layer.bias_in_weights);
    const auto ranks = expand_selected(layer, c.decision);
    c.h.resize(ranks.size());
    c.h_gated.resize(ranks.size());
    for (std::size_t j = 0; j < ranks.size(); ++j) {
        c.h[j] = dot(layer.lora.a.row(ranks[j]), x);
        c.h_gated[j] = c.decision.weights[j / layer.block] * c.h[j];
    }
    f.y = matvec(layer.w0, x);
    accumulate_columns(layer.lora.b, ranks, c.h_gated, layer.lora.scaling, f.y);
    return f;
}

Vector smora_forward_gate_bypassed(const SmoraLayer& layer, std::span<const double> x) {
    layer.validate();
    if (x.size() != layer.d_in()) throw std::invalid_argument("smora_forward: input length mismatch");
    std::vector<std::size_t> ranks(layer.rank());
    Vector h_gated(layer.rank());
    for (std::size_t i = 0; i < ranks.size(); ++i) {
        ranks[i] = i;
        h_gated[i] = 1.0 * dot(layer.lora.a.row(i), x);
    }
    Vector y = matvec(layer.w0, x);
    accumulate_columns(layer.lora.b, ranks, h_gated, layer.lora.scaling, y);
    return y;
}

Vector smora_forward_dense_oracle(const SmoraLayer& layer, std::span<const double> x) {
    layer.validate();
    if (x.size() != layer.d_in()) throw std::invalid_argument("smora_forward: input length mismatch");
    const std::size_t r = layer.rank();
    // Full score vector, biased for selection.
    const Vector scores = matvec(layer.router.w_g, x);
    Vector biased(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) biased[i] = scores[i] + layer.router.bias[i];
    const auto sel = top_k_indices(biased, layer.k);
    Vector logits;
    for (std::size_t e : sel) logits.push_back(layer.bias_in_weights ? biased[e] : scores[e]);
    const Vector w = softmax(logits);

    Matrix g(r, r);
    for (std::size_t j = 0; j < sel.size(); ++j)
        for (std::size_t q = 0; q < layer.block; ++q) {
            const std::size_t rank = sel[j] * layer.block + q;
            g(rank, rank) = w[j];
        }
    const Matrix xcol(x.size(), 1, Vector(x.begin(), x.end()));
    const Matrix delta = dense_matmul(layer.lora.b, dense_matmul(g, dense_matmul(layer.lora.a, xcol)));
    Vector y = matvec(layer.w0, x);
    for (std::size_t o = 0; o < y.size(); ++o) y[o] += layer.lora.scaling * delta(o, 0);
    return y;
}

Matrix smora_forward_batch(const SmoraLayer& layer, const Matrix& x, std::size_t threads) {
    layer.validate();
    if (layer.block != 1) throw std::invalid_argument("smora_forward_batch: requires block == 1");
    if (x.cols() != layer.d_in()) throw std::invalid_argument("smora_forward_batch: input width mismatch");
    const std::size_t t_count = x.rows(), k = layer.k;
    std::vector<std::uint32_t> sel(t_count * k);
    Matrix weights(t_count, k);
    for (std::size_t t = 0; t < t_count; ++t) {
        const auto d = gate(layer.router, x.row(t), k, layer.bias_in_weights);
        for (std::size_t j = 0; j < k; ++j) {
            sel[t * k + j] = static_cast<std::uint32_t>(d.indices[j]);
            weights(t, j) = d.weights[j];
        }
    }
    const IndexBatch idx(t_count, k, std::move(sel));
    Matrix h = indexed_rows_matmul(x, layer.lora.a, idx, threads);
    for (std::size_t i = 0; i < h.size(); ++i) h.values()[i] *= weights.values()[i];
    const Matrix delta = indexed_cols_accumulate(h, layer.lora.b, idx, threads);
    Matrix y(t_count, layer.d_out());
    for (std::size_t t = 0; t < t_count; ++t) {
        const Vector base = matvec(layer.w0, x.row(t));
        auto yr = y.row(t);
        for (std::size_t o = 0; o < yr.size(); ++o) yr[o] = base[o] + layer.lora.scaling * delta(t, o);
    }
    return y;
}

SmoraGrads SmoraGrads::zeros(const SmoraLayer& layer) {
    return {Matrix(layer.rank(), layer.d_in()), Matrix(layer.d_out(), layer.rank()),
            Matrix(layer.experts(), layer.d_in()), Vector(layer.d_in(), 0.0)};
}

Vector smora_backward_accumulate(const SmoraLayer& layer, const SmoraCache& cache, std::span<const double> dy,
                                 SmoraGrads& acc) {
    const auto& d = cache.decision;
    const std::size_t sel_ranks = d.indices.size() * layer.block;
    if (dy.size() != layer.d_out() || cache.x.size() != layer.d_in() || cache.h.size() != sel_ranks ||
        cache.h_gated.size() != sel_ranks || d.weights.size() != d.indices.size()) {
        throw std::invalid_argument("smora_backward: cache does not match the layer");
    }
    for (std::size_t e : d.indices)
        if (e >= layer.experts()) throw std::invalid_argument("smora_backward: cached index out of range");
    const double s = layer.lora.scaling;
    const auto ranks = expand_selected(layer, d);
    const auto& b = layer.lora.b;

    // dL/dh' for every selected rank, then split into gate and factor parts.
    Vector d_hg(sel_ranks, 0.0);
    for (std::size_t j = 0; j < sel_ranks; ++j) {
        double v = 0.0;
        for (std::size_t o = 0; o < b.rows(); ++o) v += b(o, ranks[j]) * dy[o];
        d_hg[j] = s * v;
    }
    const std::size_t k = d.indices.size();
    Vector d_gate(k, 0.0);
    Vector d_h(sel_ranks);
    for (std::size_t j = 0; j < sel_ranks; ++j) {
        d_gate[j / layer.block] += d_hg[j] * cache.h[j];
        d_h[j] = d_hg[j] * d.weights[j / layer.block];
    }
    // Softmax Jacobian over the retained logits.
    double gbar = 0.0;
    for (std::size_t j = 0; j < k; ++j) gbar += d.weights[j] * d_gate[j];
    Vector d_logit(k);
    for (std::size_t j = 0; j < k; ++j) d_logit[j] = d.weights[j] * (d_gate[j] - gbar);

    for (std::size_t j = 0; j < sel_ranks; ++j) {
        const std::size_t rank = ranks[j];
        for (std::size_t o = 0; o < b.rows(); ++o) acc.d_b(o, rank) += s * dy[o] * cache.h_gated[j];
        axpy(d_h[j], cache.x, acc.d_a.row(rank));
    }
    for (std::size_t j = 0; j < k; ++j) axpy(d_logit[j], cache.x, acc.d_wg.row(d.indices[j]));

    Vector d_x = matvec_t(layer.w0, dy);
    for (std::size_t j = 0; j < sel_ranks; ++j) axpy(d_h[j], layer.lora.a.row(ranks[j]), d_x);
    for (std::size_t j = 0; j < k; ++j) axpy(d_logit[j], layer.router.w_g.row(d.indices[j]), d_x);
    return d_x;
}

SmoraGrads smora_backward(const SmoraLayer& layer, const SmoraCache& cache, std::span<const double> dy) {
    SmoraGrads g = SmoraGrads::zeros(layer);
    g.d_x = smora_backward_accumulate(layer, cache, dy, g);
    return g;
}

ParamCount count_params(const LoraParams& lora) {
    lora.validate();
    ParamCount c;
    c.trainable = lora.rank() * (lora.d_in() + lora.d_out());
    c.total = c.trainable + lora.d_in() * lora.d_out();
    c.active_adapter = c.trainable;
    c.active_per_token = c.trainable;
    return c;
}

ParamCount count_params(const SmoraLayer& layer) {
    layer.validate();
    const std::size_t r = layer.rank(), n = layer.experts(), din = layer.d_in(), dout = layer.d_out();
    ParamCount c;
    c.router = n * din + n;
    c.trainable = r * (din + dout) + n * din;
    c.total = c.trainable + n + din * dout;
    c.active_adapter = layer.k * layer.block * (din + dout);
    c.active_per_token = c.active_adapter + c.router;
    return c;
}

}  // namespace smora

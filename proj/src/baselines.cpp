// Copyright (c) 2026, The SMoRA Authors
// SPDX-License-Identifier: Apache-2.0

#include "smora/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace smora {

namespace {

void require(bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument(what);
}

void check_w0(const Matrix& w0, std::size_t d_in, std::size_t d_out, std::span<const double> x) {
    require(w0.rows() == d_out && w0.cols() == d_in, "adapter: w0 shape does not match the adapter");
    require(x.size() == d_in, "adapter: input length mismatch");
}

// Softmax Jacobian-vector product: g ⊙ (v - <g, v>).
Vector softmax_backward(std::span<const double> g, std::span<const double> v) {
    double mean = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) mean += g[i] * v[i];
    Vector out(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) out[i] = g[i] * (v[i] - mean);
    return out;
}

double frobenius_dot(const Matrix& a, const Matrix& b) { return dot(a.values(), b.values()); }

// Relaxed Gumbel gate from log-probabilities and pre-drawn noise.
Vector gumbel_softmax(std::span<const double> log_probs, std::span<const double> noise, double tau) {
    Vector z(log_probs.size());
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < z.size(); ++i) {
        z[i] = (log_probs[i] + noise[i]) / tau;
        mx = std::max(mx, z[i]);
    }
    double sum = 0.0;
    for (double& v : z) {
        v = std::isinf(v) ? 0.0 : std::exp(v - mx);
        sum += v;
    }
    for (double& v : z) v /= sum;
    return z;
}

}  // namespace

std::string_view to_string(GateMode mode) {
    switch (mode) {
        case GateMode::soft: return "soft";
        case GateMode::gumbel_top1: return "gumbel_top1";
        case GateMode::topk: return "topk";
    }
    return "soft";
}

GateMode parse_gate_mode(std::string_view name) {
    if (name == "soft") return GateMode::soft;
    if (name == "gumbel_top1") return GateMode::gumbel_top1;
    if (name == "topk") return GateMode::topk;
    throw std::invalid_argument("unknown gate mode '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// LoRA-MoE

MoeLoraParams MoeLoraParams::init(std::size_t n, std::size_t rank, std::size_t d_in, std::size_t d_out,
                                  GateMode mode, Rng& rng) {
    require(n >= 1, "moe: at least one expert required");
    MoeLoraParams p;
    for (std::size_t i = 0; i < n; ++i) {
        Rng er = rng.child(i);
        p.experts.push_back(LoraParams::init(rank, d_in, d_out, er));
    }
    Rng rr = rng.child("router");
    p.router = kaiming_init(n, d_in, rr);
    p.mode = mode;
    return p;
}

void MoeLoraParams::validate() const {
    require(!experts.empty(), "moe: at least one expert required");
    for (const auto& e : experts) {
        e.validate();
        require(e.d_in() == experts.front().d_in() && e.d_out() == experts.front().d_out(),
                "moe: experts must share d_in and d_out");
    }
    require(router.rows() == experts.size(), "moe: router rows must equal the expert count");
    require(router.cols() == experts.front().d_in(), "moe: router width must equal d_in");
    if (mode == GateMode::gumbel_top1) require(tau > 0.0, "moe: gumbel temperature must be positive");
    if (mode == GateMode::topk)
        require(top_m >= 1 && top_m <= experts.size(), "moe: top_m must be in [1, n]");
}

Vector gumbel_gate(std::span<const double> probs, double tau, Rng& rng) {
    require(tau > 0.0, "gumbel_gate: temperature must be positive");
    require(!probs.empty(), "gumbel_gate: empty input");
    double sum = 0.0;
    for (double p : probs) {
        require(std::isfinite(p) && p >= 0.0, "gumbel_gate: input is not a probability vector");
        sum += p;
    }
    require(std::abs(sum - 1.0) <= 1e-9, "gumbel_gate: input does not sum to 1");
    Vector logp(probs.size()), noise(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) {
        logp[i] = std::log(probs[i]);
        noise[i] = rng.gumbel();
    }
    return gumbel_softmax(logp, noise, tau);
}

MoeForward moe_forward(const Matrix& w0, const MoeLoraParams& p, std::span<const double> x, Rng* rng) {
    p.validate();
    check_w0(w0, p.d_in(), p.d_out(), x);
    MoeForward f;
    auto& c = f.cache;
    c.x.assign(x.begin(), x.end());
    const Vector scores = matvec(p.router, x);
    switch (p.mode) {
        case GateMode::soft:
            c.active.resize(p.n());
            for (std::size_t i = 0; i < p.n(); ++i) c.active[i] = i;
            c.logits = scores;
            c.weights = softmax(scores);
            break;
        case GateMode::topk:
            c.active = top_k_indices(scores, p.top_m);
            for (std::size_t e : c.active) c.logits.push_back(scores[e]);
            c.weights = softmax(c.logits);
            break;
        case GateMode::gumbel_top1:
            if (p.hard || rng == nullptr) {
                require(p.hard, "moe: relaxed gumbel gating needs an rng");
                c.active = top_k_indices(scores, 1);
                c.logits = {scores[c.active[0]]};
                c.weights = {1.0};
            } else {
                c.relaxed = true;
                c.active.resize(p.n());
                for (std::size_t i = 0; i < p.n(); ++i) c.active[i] = i;
                c.logits = scores;
                const Vector probs = softmax(scores);
                Vector logp(p.n());
                c.noise.resize(p.n());
                for (std::size_t i = 0; i < p.n(); ++i) {
                    logp[i] = std::log(probs[i]);
                    c.noise[i] = rng->gumbel();
                }
                c.weights = gumbel_softmax(logp, c.noise, p.tau);
            }
            break;
    }
    f.y = matvec(w0, x);
    for (std::size_t j = 0; j < c.active.size(); ++j) {
        const auto& e = p.experts[c.active[j]];
        c.h.push_back(matvec(e.a, x));
        c.u.push_back(matvec(e.b, c.h.back()));
        const double coef = c.weights[j] * e.scaling;
        for (std::size_t o = 0; o < f.y.size(); ++o) f.y[o] += coef * c.u.back()[o];
    }
    return f;
}

MoeGrads MoeGrads::zeros(const MoeLoraParams& p) {
    MoeGrads g;
    for (const auto& e : p.experts) {
        g.d_a.emplace_back(e.a.rows(), e.a.cols());
        g.d_b.emplace_back(e.b.rows(), e.b.cols());
    }
    g.d_router = Matrix(p.router.rows(), p.router.cols());
    g.d_x.assign(p.d_in(), 0.0);
    return g;
}

Vector moe_backward_accumulate(const Matrix& w0, const MoeLoraParams& p, const MoeCache& c,
                               std::span<const double> dy, MoeGrads& acc) {
    require(dy.size() == p.d_out() && c.x.size() == p.d_in(), "moe_backward: shape mismatch");
    require(c.h.size() == c.active.size() && c.weights.size() == c.active.size(), "moe_backward: bad cache");
    Vector d_x = matvec_t(w0, dy);
    Vector d_gate(c.active.size());
    for (std::size_t j = 0; j < c.active.size(); ++j) {
        const std::size_t i = c.active[j];
        const auto& e = p.experts[i];
        const double coef = c.weights[j] * e.scaling;
        d_gate[j] = e.scaling * dot(dy, c.u[j]);
        add_outer(acc.d_b[i], coef, dy, c.h[j]);
        Vector dh = matvec_t(e.b, dy);
        for (double& v : dh) v *= coef;
        add_outer(acc.d_a[i], 1.0, dh, c.x);
        axpy(1.0, matvec_t(e.a, dh), d_x);
    }
    const bool routed = p.mode != GateMode::gumbel_top1 || c.relaxed;
    if (routed) {
        Vector d_logit = softmax_backward(c.weights, d_gate);
        if (c.relaxed)
            for (double& v : d_logit) v /= p.tau;
        for (std::size_t j = 0; j < c.active.size(); ++j) {
            axpy(d_logit[j], c.x, acc.d_router.row(c.active[j]));
            axpy(d_logit[j], p.router.row(c.active[j]), d_x);
        }
    }
    return d_x;
}

ParamCount count_params(const MoeLoraParams& p) {
    p.validate();
    ParamCount c;
    std::vector<std::size_t> sizes;
    std::size_t adapters = 0;
    for (const auto& e : p.experts) {
        sizes.push_back(e.rank() * (e.d_in() + e.d_out()));
        adapters += sizes.back();
    }
    std::sort(sizes.rbegin(), sizes.rend());
    std::size_t active_experts = p.n();
    if (p.mode == GateMode::topk) active_experts = p.top_m;
    if (p.mode == GateMode::gumbel_top1) active_experts = 1;
    for (std::size_t i = 0; i < active_experts; ++i) c.active_adapter += sizes[i];
    c.router = p.router.size();
    c.trainable = adapters + c.router;
    c.total = c.trainable + p.d_in() * p.d_out();
    c.active_per_token = c.active_adapter + c.router;
    return c;
}

// ---------------------------------------------------------------------------
// SMEAR

LoraParams smear_combine(std::span<const LoraParams> experts, std::span<const double> gates) {
    require(!experts.empty(), "smear: no experts");
    require(gates.size() == experts.size(), "smear: gate count must equal expert count");
    const auto& first = experts.front();
    LoraParams merged{Matrix(first.a.rows(), first.a.cols()), Matrix(first.b.rows(), first.b.cols()), first.scaling};
    for (std::size_t i = 0; i < experts.size(); ++i) {
        const auto& e = experts[i];
        require(e.a.rows() == first.a.rows() && e.a.cols() == first.a.cols() && e.b.rows() == first.b.rows() &&
                    e.b.cols() == first.b.cols(),
                "smear: experts must have identical shapes");
        require(e.scaling == first.scaling, "smear: experts must share the scaling factor");
        axpy(gates[i], e.a.values(), merged.a.values());
        axpy(gates[i], e.b.values(), merged.b.values());
    }
    return merged;
}

LoraParams smear_merge(std::span<const LoraParams> experts, std::span<const double> gates) {
    double sum = 0.0;
    for (double g : gates) {
        require(std::isfinite(g) && g >= 0.0, "smear_merge: gates must be nonnegative");
        sum += g;
    }
    require(std::abs(sum - 1.0) <= 1e-9, "smear_merge: gates must sum to 1");
    return smear_combine(experts, gates);
}

SmearParams SmearParams::init(std::size_t n, std::size_t rank, std::size_t d_in, std::size_t d_out, Rng& rng) {
    require(n >= 1, "smear: at least one expert required");
    SmearParams p;
    for (std::size_t i = 0; i < n; ++i) {
        Rng er = rng.child(i);
        p.experts.push_back(LoraParams::init(rank, d_in, d_out, er));
    }
    Rng rr = rng.child("router");
    p.router = kaiming_init(n, d_in, rr);
    return p;
}

void SmearParams::validate() const {
    require(!experts.empty(), "smear: at least one expert required");
    for (const auto& e : experts) {
        e.validate();
        require(e.a.rows() == experts.front().a.rows() && e.a.cols() == experts.front().a.cols() &&
                    e.b.rows() == experts.front().b.rows(),
                "smear: experts must have identical shapes");
    }
    require(router.rows() == experts.size() && router.cols() == experts.front().d_in(),
            "smear: router must be (n x d_in)");
}

SmearForward smear_forward(const Matrix& w0, const SmearParams& p, std::span<const double> x) {
    p.validate();
    check_w0(w0, p.experts.front().d_in(), p.experts.front().d_out(), x);
    SmearForward f;
    auto& c = f.cache;
    c.x.assign(x.begin(), x.end());
    c.gates = softmax(matvec(p.router, x));
    c.merged = smear_combine(p.experts, c.gates);
    c.h = matvec(c.merged.a, x);
    f.y = lora_forward(w0, c.merged, x);
    return f;
}

SmearGrads SmearGrads::zeros(const SmearParams& p) {
    SmearGrads g;
    for (const auto& e : p.experts) {
        g.d_a.emplace_back(e.a.rows(), e.a.cols());
        g.d_b.emplace_back(e.b.rows(), e.b.cols());
    }
    g.d_router = Matrix(p.router.rows(), p.router.cols());
    g.d_x.assign(p.router.cols(), 0.0);
    return g;
}

Vector smear_backward_accumulate(const Matrix& w0, const SmearParams& p, const SmearCache& c,
                                 std::span<const double> dy, SmearGrads& acc) {
    const auto& m = c.merged;
    require(dy.size() == m.d_out() && c.x.size() == m.d_in(), "smear_backward: shape mismatch");
    const double s = m.scaling;
    Matrix d_bm(m.d_out(), m.rank());
    add_outer(d_bm, s, dy, c.h);
    Vector dh = matvec_t(m.b, dy);
    for (double& v : dh) v *= s;
    Matrix d_am(m.rank(), m.d_in());
    add_outer(d_am, 1.0, dh, c.x);

    Vector d_gate(p.experts.size());
    for (std::size_t i = 0; i < p.experts.size(); ++i) {
        d_gate[i] = frobenius_dot(d_am, p.experts[i].a) + frobenius_dot(d_bm, p.experts[i].b);
        axpy(c.gates[i], d_am.values(), acc.d_a[i].values());
        axpy(c.gates[i], d_bm.values(), acc.d_b[i].values());
    }
    const Vector d_logit = softmax_backward(c.gates, d_gate);
    Vector d_x = matvec_t(w0, dy);
    axpy(1.0, matvec_t(m.a, dh), d_x);
    for (std::size_t i = 0; i < p.experts.size(); ++i) {
        axpy(d_logit[i], c.x, acc.d_router.row(i));
        axpy(d_logit[i], p.router.row(i), d_x);
    }
    return d_x;
}

ParamCount count_params(const SmearParams& p) {
    p.validate();
    ParamCount c;
    std::size_t adapters = 0;
    for (const auto& e : p.experts) adapters += e.rank() * (e.d_in() + e.d_out());
    c.router = p.router.size();
    c.trainable = adapters + c.router;
    c.total = c.trainable + p.experts.front().d_in() * p.experts.front().d_out();
    // Every expert participates in the per-token merge.
    c.active_adapter = adapters;
    c.active_per_token = adapters + c.router;
    return c;
}

// ---------------------------------------------------------------------------
// HydraLoRA

HydraParams HydraParams::init(std::size_t heads, std::size_t rank, std::size_t d_in, std::size_t d_out, Rng& rng) {
    require(heads >= 1, "hydra: at least one B head required");
    require(rank >= 1, "hydra: rank must be >= 1");
    HydraParams p;
    Rng ar = rng.child("a");
    p.shared_a = kaiming_init(rank, d_in, ar);
    p.bs.assign(heads, Matrix(d_out, rank));
    Rng rr = rng.child("router");
    p.router = kaiming_init(heads, d_in, rr);
    return p;
}

void HydraParams::validate() const {
    require(!bs.empty(), "hydra: at least one B head required");
    require(shared_a.rows() >= 1 && shared_a.cols() >= 1, "hydra: empty A");
    for (const auto& b : bs)
        require(b.cols() == shared_a.rows() && b.rows() == bs.front().rows(), "hydra: B heads must be (d_out x r)");
    require(router.rows() == bs.size() && router.cols() == shared_a.cols(), "hydra: router must be (N x d_in)");
}

HydraForward hydra_forward(const Matrix& w0, const HydraParams& p, std::span<const double> x) {
    p.validate();
    check_w0(w0, p.shared_a.cols(), p.bs.front().rows(), x);
    HydraForward f;
    auto& c = f.cache;
    c.x.assign(x.begin(), x.end());
    c.h = matvec(p.shared_a, x);
    c.gates = softmax(matvec(p.router, x));
    f.y = matvec(w0, x);
    for (std::size_t i = 0; i < p.bs.size(); ++i) {
        c.u.push_back(matvec(p.bs[i], c.h));
        const double coef = c.gates[i] * p.scaling;
        for (std::size_t o = 0; o < f.y.size(); ++o) f.y[o] += coef * c.u.back()[o];
    }
    return f;
}

HydraGrads HydraGrads::zeros(const HydraParams& p) {
    HydraGrads g;
    g.d_a = Matrix(p.shared_a.rows(), p.shared_a.cols());
    for (const auto& b : p.bs) g.d_bs.emplace_back(b.rows(), b.cols());
    g.d_router = Matrix(p.router.rows(), p.router.cols());
    g.d_x.assign(p.shared_a.cols(), 0.0);
    return g;
}

Vector hydra_backward_accumulate(const Matrix& w0, const HydraParams& p, const HydraCache& c,
                                 std::span<const double> dy, HydraGrads& acc) {
    require(dy.size() == p.bs.front().rows() && c.x.size() == p.shared_a.cols(), "hydra_backward: shape mismatch");
    Vector dh(p.shared_a.rows(), 0.0);
    Vector d_gate(p.bs.size());
    for (std::size_t i = 0; i < p.bs.size(); ++i) {
        const double coef = c.gates[i] * p.scaling;
        d_gate[i] = p.scaling * dot(dy, c.u[i]);
        add_outer(acc.d_bs[i], coef, dy, c.h);
        axpy(coef, matvec_t(p.bs[i], dy), dh);
    }
    add_outer(acc.d_a, 1.0, dh, c.x);
    const Vector d_logit = softmax_backward(c.gates, d_gate);
    Vector d_x = matvec_t(w0, dy);
    axpy(1.0, matvec_t(p.shared_a, dh), d_x);
    for (std::size_t i = 0; i < p.bs.size(); ++i) {
        axpy(d_logit[i], c.x, acc.d_router.row(i));
        axpy(d_logit[i], p.router.row(i), d_x);
    }
    return d_x;
}

ParamCount count_params(const HydraParams& p) {
    p.validate();
    ParamCount c;
    const std::size_t r = p.shared_a.rows(), din = p.shared_a.cols(), dout = p.bs.front().rows();
    const std::size_t adapters = r * din + p.bs.size() * r * dout;
    c.router = p.router.size();
    c.trainable = adapters + c.router;
    c.total = c.trainable + din * dout;
    c.active_adapter = adapters;
    c.active_per_token = adapters + c.router;
    return c;
}

// ---------------------------------------------------------------------------
// MoSLoRA

MosloraParams MosloraParams::init(std::size_t rank, std::size_t d_in, std::size_t d_out, Rng& rng) {
    MosloraParams p;
    Rng lr = rng.child("lora");
    p.lora = LoraParams::init(rank, d_in, d_out, lr);
    Rng mr = rng.child("mixer");
    p.mixer = kaiming_init(rank, rank, mr);
    return p;
}

void MosloraParams::validate() const {
    lora.validate();
    require(mixer.rows() == lora.rank() && mixer.cols() == lora.rank(), "moslora: mixer must be (r x r)");
}

MosloraForward moslora_forward(const Matrix& w0, const MosloraParams& p, std::span<const double> x) {
    p.validate();
    check_w0(w0, p.lora.d_in(), p.lora.d_out(), x);
    MosloraForward f;
    auto& c = f.cache;
    c.x.assign(x.begin(), x.end());
    c.h = matvec(p.lora.a, x);
    c.m = matvec(p.mixer, c.h);
    const Vector delta = matvec(p.lora.b, c.m);
    f.y = matvec(w0, x);
    for (std::size_t o = 0; o < f.y.size(); ++o) f.y[o] += p.lora.scaling * delta[o];
    return f;
}

MosloraGrads MosloraGrads::zeros(const MosloraParams& p) {
    return {Matrix(p.lora.a.rows(), p.lora.a.cols()), Matrix(p.lora.b.rows(), p.lora.b.cols()),
            Matrix(p.mixer.rows(), p.mixer.cols()), Vector(p.lora.d_in(), 0.0)};
}

Vector moslora_backward_accumulate(const Matrix& w0, const MosloraParams& p, const MosloraCache& c,
                                   std::span<const double> dy, MosloraGrads& acc) {
    require(dy.size() == p.lora.d_out() && c.x.size() == p.lora.d_in(), "moslora_backward: shape mismatch");
    const double s = p.lora.scaling;
    add_outer(acc.d_b, s, dy, c.m);
    Vector dm = matvec_t(p.lora.b, dy);
    for (double& v : dm) v *= s;
    add_outer(acc.d_mixer, 1.0, dm, c.h);
    const Vector dh = matvec_t(p.mixer, dm);
    add_outer(acc.d_a, 1.0, dh, c.x);
    Vector d_x = matvec_t(w0, dy);
    axpy(1.0, matvec_t(p.lora.a, dh), d_x);
    return d_x;
}

ParamCount count_params(const MosloraParams& p) {
    p.validate();
    ParamCount c = count_params(p.lora);
    c.trainable += p.mixer.size();
    c.total += p.mixer.size();
    c.active_adapter += p.mixer.size();
    c.active_per_token += p.mixer.size();
    return c;
}

}  // namespace smora

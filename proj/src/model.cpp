// Copyright (c) 2026, The SMoRA Authors
// SPDX-License-Identifier: Apache-2.0

#include "smora/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <type_traits>

#include <nlohmann/json.hpp>

#include "smora/parallel.hpp"

namespace smora {

namespace {

constexpr std::array<std::pair<AdapterKind, std::string_view>, 6> kKindNames{{
    {AdapterKind::lora, "lora"},
    {AdapterKind::smora, "smora"},
    {AdapterKind::moe, "moe"},
    {AdapterKind::smear, "smear"},
    {AdapterKind::hydra, "hydra"},
    {AdapterKind::moslora, "moslora"},
}};

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};

// Per-kind forward / backward plumbing. Each kind provides a cache-carrying
// forward, an accumulating backward and its trainable gradient buffers in
// the same order as its trainable tensors.

LoraGrads zero_grads(const LoraModel& m) {
    return {Matrix(m.lora.rank(), m.lora.d_in()), Matrix(m.lora.d_out(), m.lora.rank()), {}};
}
SmoraGrads zero_grads(const SmoraLayer& m) { return SmoraGrads::zeros(m); }
MoeGrads zero_grads(const MoeModel& m) { return MoeGrads::zeros(m.params); }
SmearGrads zero_grads(const SmearModel& m) { return SmearGrads::zeros(m.params); }
HydraGrads zero_grads(const HydraModel& m) { return HydraGrads::zeros(m.params); }
MosloraGrads zero_grads(const MosloraModel& m) { return MosloraGrads::zeros(m.params); }

void grad_spans(LoraGrads& g, std::vector<std::span<double>>& out) {
    out.push_back(g.d_a.values());
    out.push_back(g.d_b.values());
}
void grad_spans(SmoraGrads& g, std::vector<std::span<double>>& out) {
    out.push_back(g.d_a.values());
    out.push_back(g.d_b.values());
    out.push_back(g.d_wg.values());
}
void grad_spans(MoeGrads& g, std::vector<std::span<double>>& out) {
    for (std::size_t i = 0; i < g.d_a.size(); ++i) {
        out.push_back(g.d_a[i].values());
        out.push_back(g.d_b[i].values());
    }
    out.push_back(g.d_router.values());
}
void grad_spans(SmearGrads& g, std::vector<std::span<double>>& out) {
    for (std::size_t i = 0; i < g.d_a.size(); ++i) {
        out.push_back(g.d_a[i].values());
        out.push_back(g.d_b[i].values());
    }
    out.push_back(g.d_router.values());
}
void grad_spans(HydraGrads& g, std::vector<std::span<double>>& out) {
    out.push_back(g.d_a.values());
    for (auto& b : g.d_bs) out.push_back(b.values());
    out.push_back(g.d_router.values());
}
void grad_spans(MosloraGrads& g, std::vector<std::span<double>>& out) {
    out.push_back(g.d_a.values());
    out.push_back(g.d_b.values());
    out.push_back(g.d_mixer.values());
}

struct LoraFwd {
    Vector y;
    LoraCache cache;
};

LoraFwd forward(const LoraModel& m, std::span<const double> x, Rng*) {
    LoraCache c = lora_cache(m.lora, x);
    Vector y = matvec(m.w0, x);
    const Vector u = matvec(m.lora.b, c.h);
    axpy(m.lora.scaling, u, y);
    return {std::move(y), std::move(c)};
}
SmoraForward forward(const SmoraLayer& m, std::span<const double> x, Rng*) { return smora_forward(m, x); }
MoeForward forward(const MoeModel& m, std::span<const double> x, Rng* rng) {
    return moe_forward(m.w0, m.params, x, rng);
}
SmearForward forward(const SmearModel& m, std::span<const double> x, Rng*) {
    return smear_forward(m.w0, m.params, x);
}
HydraForward forward(const HydraModel& m, std::span<const double> x, Rng*) {
    return hydra_forward(m.w0, m.params, x);
}
MosloraForward forward(const MosloraModel& m, std::span<const double> x, Rng*) {
    return moslora_forward(m.w0, m.params, x);
}

void backward(const LoraModel& m, const LoraCache& c, std::span<const double> dy, LoraGrads& g) {
    lora_backward_accumulate(m.w0, m.lora, c, dy, g);
}
void backward(const SmoraLayer& m, const SmoraCache& c, std::span<const double> dy, SmoraGrads& g) {
    smora_backward_accumulate(m, c, dy, g);
}
void backward(const MoeModel& m, const MoeCache& c, std::span<const double> dy, MoeGrads& g) {
    moe_backward_accumulate(m.w0, m.params, c, dy, g);
}
void backward(const SmearModel& m, const SmearCache& c, std::span<const double> dy, SmearGrads& g) {
    smear_backward_accumulate(m.w0, m.params, c, dy, g);
}
void backward(const HydraModel& m, const HydraCache& c, std::span<const double> dy, HydraGrads& g) {
    hydra_backward_accumulate(m.w0, m.params, c, dy, g);
}
void backward(const MosloraModel& m, const MosloraCache& c, std::span<const double> dy, MosloraGrads& g) {
    moslora_backward_accumulate(m.w0, m.params, c, dy, g);
}

void push(std::vector<TensorView>& out, std::string name, Matrix& m, bool trainable) {
    out.push_back({std::move(name), m.rows(), m.cols(), m.values(), trainable});
}

void push_experts(std::vector<TensorView>& out, std::vector<LoraParams>& experts) {
    for (std::size_t i = 0; i < experts.size(); ++i) {
        push(out, "expert" + std::to_string(i) + ".a", experts[i].a, true);
        push(out, "expert" + std::to_string(i) + ".b", experts[i].b, true);
    }
}

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument("adapter spec: " + msg);
}

}  // namespace

std::string_view to_string(AdapterKind kind) {
    for (const auto& [k, name] : kKindNames)
        if (k == kind) return name;
    return "unknown";
}

AdapterKind parse_adapter_kind(std::string_view name) {
    for (const auto& [k, n] : kKindNames)
        if (n == name) return k;
    throw std::invalid_argument("unknown adapter kind '" + std::string(name) + "'");
}

void AdapterSpec::validate() const {
    require(rank >= 1, "rank must be at least 1");
    require(std::isfinite(scaling), "scaling must be finite");
    switch (kind) {
        case AdapterKind::smora:
            require(block >= 1 && rank % block == 0, "rank must be a multiple of block");
            require(k >= 1 && k <= rank / block,
                    "k=" + std::to_string(k) + " must lie in [1, " + std::to_string(rank / block) + "]");
            require(update_rate > 0.0, "update_rate must be positive");
            break;
        case AdapterKind::moe:
        case AdapterKind::smear:
        case AdapterKind::hydra:
            require(experts >= 1, "experts must be at least 1");
            if (kind == AdapterKind::moe) {
                require(tau > 0.0, "tau must be positive");
                require(top_m >= 1 && top_m <= experts, "top_m must lie in [1, experts]");
            }
            break;
        default:
            break;
    }
}

nlohmann::json to_json(const AdapterSpec& s) {
    return {{"kind", std::string(to_string(s.kind))},
            {"rank", s.rank},
            {"k", s.k},
            {"block", s.block},
            {"experts", s.experts},
            {"mode", std::string(to_string(s.mode))},
            {"tau", s.tau},
            {"top_m", s.top_m},
            {"scaling", s.scaling},
            {"update_rate", s.update_rate},
            {"bias_in_weights", s.bias_in_weights}};
}

AdapterSpec adapter_spec_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw std::invalid_argument("adapter: expected an object");
    AdapterSpec s;
    for (const auto& [key, v] : j.items()) {
        try {
            if (key == "kind") s.kind = parse_adapter_kind(v.get<std::string>());
            else if (key == "rank") s.rank = v.get<std::size_t>();
            else if (key == "k") s.k = v.get<std::size_t>();
            else if (key == "block") s.block = v.get<std::size_t>();
            else if (key == "experts") s.experts = v.get<std::size_t>();
            else if (key == "mode") s.mode = parse_gate_mode(v.get<std::string>());
            else if (key == "tau") s.tau = v.get<double>();
            else if (key == "top_m") s.top_m = v.get<std::size_t>();
            else if (key == "scaling") s.scaling = v.get<double>();
            else if (key == "update_rate") s.update_rate = v.get<double>();
            else if (key == "bias_in_weights") s.bias_in_weights = v.get<bool>();
            else throw std::invalid_argument("unknown key");
        } catch (const nlohmann::json::exception& e) {
            throw std::invalid_argument("adapter." + key + ": " + e.what());
        } catch (const std::invalid_argument& e) {
            throw std::invalid_argument("adapter." + key + ": " + e.what());
        }
    }
    s.validate();
    return s;
}

const Matrix& Model::w0() const {
    return std::visit(overloaded{[](const SmoraLayer& l) -> const Matrix& { return l.w0; },
                                 [](const auto& l) -> const Matrix& { return l.w0; }},
                      layer);
}

Model make_model(const AdapterSpec& spec, Matrix w0, Rng& rng) {
    spec.validate();
    const std::size_t d_in = w0.cols(), d_out = w0.rows();
    if (d_in == 0 || d_out == 0) throw std::invalid_argument("make_model: empty base weight");
    Model m{spec, LoraModel{}};
    switch (spec.kind) {
        case AdapterKind::lora:
            m.layer = LoraModel{std::move(w0), LoraParams::init(spec.rank, d_in, d_out, rng, spec.scaling)};
            break;
        case AdapterKind::smora: {
            SmoraLayer l = SmoraLayer::init(std::move(w0), spec.rank, spec.k, rng, spec.block, spec.update_rate);
            l.lora.scaling = spec.scaling;
            l.bias_in_weights = spec.bias_in_weights;
            m.layer = std::move(l);
            break;
        }
        case AdapterKind::moe: {
            MoeLoraParams p = MoeLoraParams::init(spec.experts, spec.rank, d_in, d_out, spec.mode, rng);
            p.tau = spec.tau;
            p.top_m = spec.top_m;
            for (auto& e : p.experts) e.scaling = spec.scaling;
            p.validate();
            m.layer = MoeModel{std::move(w0), std::move(p)};
            break;
        }
        case AdapterKind::smear: {
            SmearParams p = SmearParams::init(spec.experts, spec.rank, d_in, d_out, rng);
            for (auto& e : p.experts) e.scaling = spec.scaling;
            m.layer = SmearModel{std::move(w0), std::move(p)};
            break;
        }
        case AdapterKind::hydra: {
            HydraParams p = HydraParams::init(spec.experts, spec.rank, d_in, d_out, rng);
            p.scaling = spec.scaling;
            m.layer = HydraModel{std::move(w0), std::move(p)};
            break;
        }
        case AdapterKind::moslora: {
            MosloraParams p = MosloraParams::init(spec.rank, d_in, d_out, rng);
            p.lora.scaling = spec.scaling;
            m.layer = MosloraModel{std::move(w0), std::move(p)};
            break;
        }
    }
    return m;
}

Vector predict(const Model& model, std::span<const double> x) {
    return std::visit(overloaded{[&](const MoeModel& m) {
                                     if (m.params.mode != GateMode::gumbel_top1 || m.params.hard)
                                         return moe_forward(m.w0, m.params, x).y;
                                     MoeLoraParams hard = m.params;
                                     hard.hard = true;
                                     return moe_forward(m.w0, hard, x).y;
                                 },
                                 [&](const auto& m) { return forward(m, x, nullptr).y; }},
                      model.layer);
}

std::vector<TensorView> tensors(Model& model) {
    std::vector<TensorView> out;
    std::visit(overloaded{
                   [&](LoraModel& m) {
                       push(out, "w0", m.w0, false);
                       push(out, "a", m.lora.a, true);
                       push(out, "b", m.lora.b, true);
                   },
                   [&](SmoraLayer& m) {
                       push(out, "w0", m.w0, false);
                       push(out, "a", m.lora.a, true);
                       push(out, "b", m.lora.b, true);
                       push(out, "router.w_g", m.router.w_g, true);
                       out.push_back({"router.bias", 1, m.router.bias.size(), m.router.bias, false});
                   },
                   [&](MoeModel& m) {
                       push(out, "w0", m.w0, false);
                       push_experts(out, m.params.experts);
                       push(out, "router", m.params.router, true);
                   },
                   [&](SmearModel& m) {
                       push(out, "w0", m.w0, false);
                       push_experts(out, m.params.experts);
                       push(out, "router", m.params.router, true);
                   },
                   [&](HydraModel& m) {
                       push(out, "w0", m.w0, false);
                       push(out, "shared_a", m.params.shared_a, true);
                       for (std::size_t i = 0; i < m.params.bs.size(); ++i)
                           push(out, "b" + std::to_string(i), m.params.bs[i], true);
                       push(out, "router", m.params.router, true);
                   },
                   [&](MosloraModel& m) {
                       push(out, "w0", m.w0, false);
                       push(out, "a", m.params.lora.a, true);
                       push(out, "b", m.params.lora.b, true);
                       push(out, "mixer", m.params.mixer, true);
                   },
               },
               model.layer);
    return out;
}

std::vector<ConstTensorView> tensors(const Model& model) {
    std::vector<ConstTensorView> out;
    // The mutable walk only builds views; nothing is written through them.
    for (auto& t : tensors(const_cast<Model&>(model))) out.push_back({t.name, t.rows, t.cols, t.data, t.trainable});
    return out;
}

ParamCount count_params(const Model& model) {
    return std::visit(overloaded{[](const LoraModel& m) { return count_params(m.lora); },
                                 [](const SmoraLayer& m) { return count_params(m); },
                                 [](const auto& m) { return count_params(m.params); }},
                      model.layer);
}

BatchResult batch_gradient(const Model& model, const Matrix& x, const Matrix& y, std::span<const std::size_t> rows,
                           std::uint64_t gumbel_seed, std::uint64_t token_offset, std::size_t threads,
                           bool keep_decisions) {
    if (x.rows() != y.rows() || x.cols() != model.d_in() || y.cols() != model.d_out())
        throw std::invalid_argument("batch_gradient: data shape does not match the model");
    if (rows.empty()) throw std::invalid_argument("batch_gradient: empty batch");
    for (std::size_t r : rows)
        if (r >= x.rows()) throw std::invalid_argument("batch_gradient: row index out of range");
    if (threads == 0) throw std::invalid_argument("batch_gradient: threads must be positive");

    return std::visit(
        [&](const auto& layer) {
            using Layer = std::decay_t<decltype(layer)>;
            using Grads = decltype(zero_grads(layer));
            constexpr bool routed = std::is_same_v<Layer, SmoraLayer>;
            const std::size_t n = rows.size();
            const std::size_t chunks = std::min(threads, n);
            const double norm = 2.0 / static_cast<double>(model.d_out() * n);
            const Rng gumbel_root(gumbel_seed);

            struct Partial {
                Grads grads;
                double loss = 0.0;
                RoutingStats stats;
                std::vector<GateDecision> decisions;
            };
            std::vector<Partial> parts;
            parts.reserve(chunks);
            for (std::size_t c = 0; c < chunks; ++c) {
                Partial p{zero_grads(layer), 0.0, RoutingStats{}, {}};
                if constexpr (routed) p.stats = RoutingStats(layer.experts(), layer.k);
                parts.push_back(std::move(p));
            }
            parallel_for(chunks, chunks, [&](std::size_t begin, std::size_t end) {
                for (std::size_t c = begin; c < end; ++c) {
                    Partial& part = parts[c];
                    const std::size_t lo = n * c / chunks, hi = n * (c + 1) / chunks;
                    Vector dy(model.d_out());
                    for (std::size_t i = lo; i < hi; ++i) {
                        Rng token_rng = gumbel_root.child(token_offset + i);
                        auto f = forward(layer, x.row(rows[i]), &token_rng);
                        const auto target = y.row(rows[i]);
                        double se = 0.0;
                        for (std::size_t o = 0; o < dy.size(); ++o) {
                            const double e = f.y[o] - target[o];
                            se += e * e;
                            dy[o] = norm * e;
                        }
                        part.loss += se;
                        backward(layer, f.cache, dy, part.grads);
                        if constexpr (routed) {
                            part.stats.record(f.cache.decision);
                            if (keep_decisions) part.decisions.push_back(std::move(f.cache.decision));
                        }
                    }
                }
            });

            BatchResult out;
            std::vector<std::span<double>> spans;
            grad_spans(parts[0].grads, spans);
            for (auto s : spans) out.grads.emplace_back(s.begin(), s.end());
            double se = parts[0].loss;
            if constexpr (routed) out.stats = parts[0].stats;
            out.decisions = std::move(parts[0].decisions);
            for (std::size_t c = 1; c < chunks; ++c) {
                spans.clear();
                grad_spans(parts[c].grads, spans);
                for (std::size_t t = 0; t < spans.size(); ++t) axpy(1.0, spans[t], out.grads[t]);
                se += parts[c].loss;
                if constexpr (routed) out.stats.merge(parts[c].stats);
                for (auto& d : parts[c].decisions) out.decisions.push_back(std::move(d));
            }
            out.loss = se / static_cast<double>(model.d_out() * n);
            return out;
        },
        model.layer);
}

}  // namespace smora

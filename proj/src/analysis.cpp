// Copyright (c) 2026, The SMoRA Authors
// SPDX-License-Identifier: Apache-2.0

#include "smora/analysis.hpp"

#include <cmath>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>

#include "smora/equivalence.hpp"

namespace smora {

namespace {

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};

}  // namespace

Matrix rank_similarity(const Matrix& a, const Matrix& b, bool cosine) {
    if (a.rows() != b.cols()) throw std::invalid_argument("rank_similarity: A rows must equal B columns");
    const std::size_t r = a.rows(), din = a.cols(), dout = b.rows();
    Matrix cat(r, din + dout);
    for (std::size_t i = 0; i < r; ++i) {
        auto row = cat.row(i);
        for (std::size_t j = 0; j < din; ++j) row[j] = a(i, j);
        for (std::size_t o = 0; o < dout; ++o) row[din + o] = b(o, i);
        if (cosine) {
            const double n = std::sqrt(dot(row, row));
            if (n > 0.0)
                for (double& v : row) v /= n;
        }
    }
    Matrix c(r, r);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = i; j < r; ++j) c(i, j) = c(j, i) = dot(cat.row(i), cat.row(j));
    return c;
}

double diagonal_dominance(const Matrix& c) {
    if (c.rows() != c.cols() || c.rows() < 2)
        throw std::invalid_argument("diagonal_dominance: need a square matrix with at least two rows");
    const std::size_t r = c.rows();
    double diag = 0.0, off = 0.0;
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < r; ++j) (i == j ? diag : off) += std::abs(c(i, j));
    diag /= static_cast<double>(r);
    off /= static_cast<double>(r * (r - 1));
    return off > 0.0 ? diag / off : std::numeric_limits<double>::infinity();
}

std::pair<Matrix, Matrix> adapter_factors(const Model& model) {
    return std::visit(
        overloaded{
            [](const LoraModel& m) { return std::pair{m.lora.a, m.lora.b}; },
            [](const SmoraLayer& m) { return std::pair{m.lora.a, m.lora.b}; },
            [](const MoeModel& m) {
                auto bw = concat_experts(m.params.experts);
                return std::pair{std::move(bw.a_tilde), std::move(bw.b_tilde)};
            },
            [](const SmearModel& m) {
                auto bw = concat_experts(m.params.experts);
                return std::pair{std::move(bw.a_tilde), std::move(bw.b_tilde)};
            },
            [](const HydraModel& m) {
                Matrix mean(m.params.bs.front().rows(), m.params.bs.front().cols());
                for (const auto& b : m.params.bs) axpy(1.0 / static_cast<double>(m.params.bs.size()), b.values(), mean.values());
                return std::pair{m.params.shared_a, std::move(mean)};
            },
            [](const MosloraModel& m) {
                return std::pair{m.params.lora.a, dense_matmul(m.params.lora.b, m.params.mixer)};
            },
        },
        model.layer);
}

RoutingDistribution routing_distribution(std::span<const GateDecision> decisions, std::span<const std::size_t> labels,
                                         std::size_t tasks, std::size_t experts) {
    if (decisions.size() != labels.size())
        throw std::invalid_argument("routing_distribution: one label per decision required");
    if (tasks == 0 || experts == 0) throw std::invalid_argument("routing_distribution: empty task or expert range");
    RoutingDistribution d{Matrix(tasks, experts), Matrix(tasks, experts), Matrix(tasks, tasks),
                          std::vector<std::size_t>(tasks, 0)};
    std::vector<double> slots(tasks, 0.0);
    for (std::size_t i = 0; i < decisions.size(); ++i) {
        const std::size_t t = labels[i];
        if (t >= tasks) throw std::invalid_argument("routing_distribution: unknown task label " + std::to_string(t));
        ++d.tokens[t];
        for (std::size_t e : decisions[i].indices) {
            if (e >= experts) throw std::invalid_argument("routing_distribution: expert index out of range");
            d.frequency(t, e) += 1.0;
            slots[t] += 1.0;
        }
    }
    for (std::size_t t = 0; t < tasks; ++t) {
        for (std::size_t e = 0; e < experts; ++e) {
            const double c = d.frequency(t, e);
            d.selection_rate(t, e) = d.tokens[t] ? c / static_cast<double>(d.tokens[t]) : 0.0;
            d.frequency(t, e) = slots[t] > 0.0 ? c / slots[t] : 0.0;
        }
    }
    for (std::size_t s = 0; s < tasks; ++s) {
        for (std::size_t t = 0; t < tasks; ++t) {
            const double ns = std::sqrt(dot(d.frequency.row(s), d.frequency.row(s)));
            const double nt = std::sqrt(dot(d.frequency.row(t), d.frequency.row(t)));
            d.task_similarity(s, t) =
                ns > 0.0 && nt > 0.0 ? dot(d.frequency.row(s), d.frequency.row(t)) / (ns * nt) : 0.0;
        }
    }
    return d;
}

LoadTrace load_trace(const RunMetrics& metrics) {
    if (metrics.max_vio.empty() || metrics.final_counts.empty())
        throw std::invalid_argument("load_trace: metrics carry no routing history");
    LoadTrace t;
    t.max_vio = metrics.max_vio;
    double mean = 0.0;
    for (auto c : metrics.final_counts) mean += static_cast<double>(c);
    mean /= static_cast<double>(metrics.final_counts.size());
    if (mean <= 0.0) throw std::invalid_argument("load_trace: final step routed no tokens");
    for (auto c : metrics.final_counts) t.normalized_loads.push_back(static_cast<double>(c) / mean);
    return t;
}

void write_similarity_csv(std::ostream& os, const Matrix& c) {
    for (std::size_t i = 0; i < c.rows(); ++i) {
        for (std::size_t j = 0; j < c.cols(); ++j) os << (j ? "," : "") << format_double(c(i, j));
        os << '\n';
    }
}

void write_histogram_csv(std::ostream& os, const RoutingDistribution& dist) {
    os << "task,rank,frequency\n";
    for (std::size_t t = 0; t < dist.frequency.rows(); ++t)
        for (std::size_t e = 0; e < dist.frequency.cols(); ++e)
            os << t << ',' << e << ',' << format_double(dist.frequency(t, e)) << '\n';
}

void write_load_trace_csv(std::ostream& os, const LoadTrace& trace) {
    os << "step,max_vio\n";
    for (std::size_t s = 0; s < trace.max_vio.size(); ++s) os << s << ',' << format_double(trace.max_vio[s]) << '\n';
}

}  // namespace smora

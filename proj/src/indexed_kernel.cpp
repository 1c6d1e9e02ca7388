// Copyright (c) 2026, The SMoRA Authors
// SPDX-License-Identifier: Apache-2.0

#include "smora/indexed_kernel.hpp"

#include <algorithm>
#include <chrono>
#include <cstring>
#include <cstdio>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "smora/parallel.hpp"

namespace smora {

namespace {

// Shared by every variant so that all of them round identically.
template <typename T>
inline T dot_lanes(const T* __restrict a, const T* __restrict b, std::size_t n) noexcept {
    constexpr std::size_t kLanes = 8;
    T acc[kLanes] = {};
    std::size_t i = 0;
    for (; i + kLanes <= n; i += kLanes) {
        for (std::size_t l = 0; l < kLanes; ++l) acc[l] += a[i + l] * b[i + l];
    }
    T tail = T{0};
    for (; i < n; ++i) tail += a[i] * b[i];
    const T s01 = acc[0] + acc[1];
    const T s23 = acc[2] + acc[3];
    const T s45 = acc[4] + acc[5];
    const T s67 = acc[6] + acc[7];
    return ((s01 + s23) + (s45 + s67)) + tail;
}

void require(bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(what);
}

}  // namespace

IndexBatch::IndexBatch(std::size_t tokens, std::size_t k, std::vector<std::uint32_t> idx)
    : tokens(tokens), k(k), idx(std::move(idx)) {
    require(this->idx.size() == tokens * k, "IndexBatch: idx length != tokens * k");
}

void IndexBatch::validate(std::size_t experts) const {
    require(idx.size() == tokens * k, "IndexBatch: idx length != tokens * k");
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= experts) {
            throw std::invalid_argument("IndexBatch: index " + std::to_string(idx[i]) + " at token " +
                                        std::to_string(i / k) + " out of range for " + std::to_string(experts) +
                                        " experts");
        }
    }
}

template <typename T>
void indexed_rows_matmul_into(const BasicMatrix<T>& x, const BasicMatrix<T>& a, const IndexBatch& idx,
                              std::span<T> out, std::size_t threads) {
    const std::size_t d = x.cols();
    const std::size_t k = idx.k;
    parallel_for(idx.tokens, threads, [&](std::size_t begin, std::size_t end) {
        for (std::size_t t = begin; t < end; ++t) {
            const T* xt = x.data() + t * d;
            const std::uint32_t* sel = idx.idx.data() + t * k;
            T* o = out.data() + t * k;
            for (std::size_t j = 0; j < k; ++j) o[j] = dot_lanes(a.data() + std::size_t{sel[j]} * d, xt, d);
        }
    });
}

template <typename T>
void indexed_cols_accumulate_into(std::span<const T> h, const BasicMatrix<T>& b, const IndexBatch& idx,
                                  std::span<T> out, std::size_t threads) {
    const std::size_t d = b.rows();
    const std::size_t r = b.cols();
    const std::size_t k = idx.k;
    parallel_for(idx.tokens, threads, [&](std::size_t begin, std::size_t end) {
        for (std::size_t t = begin; t < end; ++t) {
            const std::uint32_t* sel = idx.idx.data() + t * k;
            const T* ht = h.data() + t * k;
            T* o = out.data() + t * d;
            for (std::size_t i = 0; i < d; ++i) {
                const T* brow = b.data() + i * r;
                T acc = T{0};
                for (std::size_t j = 0; j < k; ++j) acc += ht[j] * brow[sel[j]];
                o[i] = acc;
            }
        }
    });
}

template <typename T>
BasicMatrix<T> indexed_rows_matmul(const BasicMatrix<T>& x, const BasicMatrix<T>& a, const IndexBatch& idx,
                                   std::size_t threads) {
    require(x.cols() == a.cols(), "indexed_rows_matmul: x and a must share d");
    require(x.rows() == idx.tokens, "indexed_rows_matmul: x rows != idx tokens");
    idx.validate(a.rows());
    BasicMatrix<T> out(idx.tokens, idx.k);
    indexed_rows_matmul_into(x, a, idx, out.values(), threads);
    return out;
}

template <typename T>
BasicMatrix<T> indexed_cols_accumulate(const BasicMatrix<T>& h, const BasicMatrix<T>& b, const IndexBatch& idx,
                                       std::size_t threads) {
    require(h.rows() == idx.tokens && h.cols() == idx.k, "indexed_cols_accumulate: h must be tokens x k");
    idx.validate(b.cols());
    BasicMatrix<T> out(idx.tokens, b.rows());
    indexed_cols_accumulate_into(std::span<const T>(h.values()), b, idx, out.values(), threads);
    return out;
}

template <typename T>
BasicMatrix<T> dense_gates(const IndexBatch& idx, const BasicMatrix<T>& weights, std::size_t experts) {
    require(weights.rows() == idx.tokens && weights.cols() == idx.k, "dense_gates: weights must be tokens x k");
    idx.validate(experts);
    BasicMatrix<T> g(idx.tokens, experts);
    for (std::size_t t = 0; t < idx.tokens; ++t)
        for (std::size_t j = 0; j < idx.k; ++j) g(t, idx(t, j)) += weights(t, j);
    return g;
}

namespace {

// Body of the per-expert loop, writing into a caller-owned output so the
// benchmark can separate intermediates from the result.
template <typename T, typename GateFn>
void loop_per_expert_into(const BasicMatrix<T>& x, const BasicMatrix<T>& a, const BasicMatrix<T>& b,
                          GateFn&& gates, std::span<T> out) {
    const std::size_t t_count = x.rows();
    const std::size_t d_in = x.cols();
    const std::size_t d_out = b.rows();
    const std::size_t r = a.rows();
    std::fill(out.begin(), out.end(), T{0});
    TrackedVector<std::size_t> tokens;
    TrackedVector<T> gathered;
    TrackedVector<T> projected;
    TrackedVector<T> contrib;
    for (std::size_t e = 0; e < r; ++e) {
        tokens.clear();
        for (std::size_t t = 0; t < t_count; ++t)
            if (gates(t, e) != T{0}) tokens.push_back(t);
        if (tokens.empty()) continue;
        const std::size_t n = tokens.size();
        gathered.resize(n * d_in);
        for (std::size_t s = 0; s < n; ++s)
            std::memcpy(gathered.data() + s * d_in, x.data() + tokens[s] * d_in, d_in * sizeof(T));
        projected.resize(n);
        const T* arow = a.data() + e * d_in;
        for (std::size_t s = 0; s < n; ++s)
            projected[s] = dot_lanes(arow, gathered.data() + s * d_in, d_in) * gates(tokens[s], e);
        contrib.resize(n * d_out);
        for (std::size_t s = 0; s < n; ++s)
            for (std::size_t i = 0; i < d_out; ++i) contrib[s * d_out + i] = projected[s] * b(i, e);
        for (std::size_t s = 0; s < n; ++s) {
            T* o = out.data() + tokens[s] * d_out;
            const T* c = contrib.data() + s * d_out;
            for (std::size_t i = 0; i < d_out; ++i) o[i] += c[i];
        }
    }
}

}  // namespace

template <typename T>
BasicMatrix<T> oracle_loop_per_expert(const BasicMatrix<T>& x, const BasicMatrix<T>& a, const BasicMatrix<T>& b,
                                      const BasicMatrix<T>& gates) {
    require(x.cols() == a.cols(), "oracle_loop_per_expert: x and a must share d_in");
    require(b.cols() == a.rows(), "oracle_loop_per_expert: b cols != a rows");
    require(gates.rows() == x.rows() && gates.cols() == a.rows(), "oracle_loop_per_expert: gates must be t x r");
    BasicMatrix<T> out(x.rows(), b.rows());
    loop_per_expert_into(x, a, b, [&](std::size_t t, std::size_t e) { return gates(t, e); }, out.values());
    return out;
}

template BasicMatrix<double> indexed_rows_matmul(const BasicMatrix<double>&, const BasicMatrix<double>&,
                                                 const IndexBatch&, std::size_t);
template BasicMatrix<float> indexed_rows_matmul(const BasicMatrix<float>&, const BasicMatrix<float>&,
                                                const IndexBatch&, std::size_t);
template BasicMatrix<double> indexed_cols_accumulate(const BasicMatrix<double>&, const BasicMatrix<double>&,
                                                     const IndexBatch&, std::size_t);
template BasicMatrix<float> indexed_cols_accumulate(const BasicMatrix<float>&, const BasicMatrix<float>&,
                                                    const IndexBatch&, std::size_t);
template void indexed_rows_matmul_into(const BasicMatrix<double>&, const BasicMatrix<double>&, const IndexBatch&,
                                       std::span<double>, std::size_t);
template void indexed_rows_matmul_into(const BasicMatrix<float>&, const BasicMatrix<float>&, const IndexBatch&,
                                       std::span<float>, std::size_t);
template void indexed_cols_accumulate_into(std::span<const double>, const BasicMatrix<double>&, const IndexBatch&,
                                           std::span<double>, std::size_t);
template void indexed_cols_accumulate_into(std::span<const float>, const BasicMatrix<float>&, const IndexBatch&,
                                           std::span<float>, std::size_t);
template BasicMatrix<double> oracle_loop_per_expert(const BasicMatrix<double>&, const BasicMatrix<double>&,
                                                    const BasicMatrix<double>&, const BasicMatrix<double>&);
template BasicMatrix<float> oracle_loop_per_expert(const BasicMatrix<float>&, const BasicMatrix<float>&,
                                                   const BasicMatrix<float>&, const BasicMatrix<float>&);
template BasicMatrix<double> dense_gates(const IndexBatch&, const BasicMatrix<double>&, std::size_t);
template BasicMatrix<float> dense_gates(const IndexBatch&, const BasicMatrix<float>&, std::size_t);

// ---------------------------------------------------------------------------
// Benchmark harness

void BenchConfig::validate() const {
    require(t > 0 && d > 0 && r > 0 && k > 0, "bench: sizes must be positive");
    require(k <= r, "bench: k must not exceed r");
    require(threads > 0, "bench: threads must be positive");
    require(repeats > 0, "bench: repeats must be positive");
    require(dtype == "f32" || dtype == "f64", "bench: dtype must be f32 or f64");
}

std::uint64_t checksum_bytes(std::span<const std::byte> bytes) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::byte b : bytes) {
        h ^= static_cast<std::uint64_t>(b);
        h *= 0x100000001b3ULL;
    }
    return h;
}

namespace {

template <typename T>
struct BenchInputs {
    BasicMatrix<T> x, a, b, gate_weights;
    IndexBatch idx;
};

// Router-like selections: k distinct ranks per token, sorted ascending.
template <typename T>
BenchInputs<T> make_bench_inputs(const BenchConfig& c) {
    Rng root(c.seed);
    Rng rx = root.child("x"), ra = root.child("a"), rb = root.child("b"), ri = root.child("idx");
    BenchInputs<T> in;
    in.x = BasicMatrix<T>(c.t, c.d);
    for (T& v : in.x.values()) v = static_cast<T>(rx.normal());
    in.a = BasicMatrix<T>(c.r, c.d);
    for (T& v : in.a.values()) v = static_cast<T>(ra.normal() / 32.0);
    in.b = BasicMatrix<T>(c.d, c.r);
    for (T& v : in.b.values()) v = static_cast<T>(rb.normal() / 8.0);

    std::vector<std::uint32_t> idx(c.t * c.k);
    std::vector<std::uint32_t> pool(c.r);
    in.gate_weights = BasicMatrix<T>(c.t, c.k);
    for (std::size_t t = 0; t < c.t; ++t) {
        for (std::size_t e = 0; e < c.r; ++e) pool[e] = static_cast<std::uint32_t>(e);
        for (std::size_t j = 0; j < c.k; ++j) {
            const auto pick = j + ri.below(c.r - j);
            std::swap(pool[j], pool[pick]);
        }
        std::sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(c.k));
        std::copy_n(pool.begin(), c.k, idx.begin() + static_cast<std::ptrdiff_t>(t * c.k));
        Vector logits(c.k);
        for (double& l : logits) l = ri.normal();
        const Vector w = softmax(logits);
        for (std::size_t j = 0; j < c.k; ++j) in.gate_weights(t, j) = static_cast<T>(w[j]);
    }
    in.idx = IndexBatch(c.t, c.k, std::move(idx));
    return in;
}

template <typename T>
void run_indexed(const BenchInputs<T>& in, std::span<T> out, std::size_t threads) {
    TrackedVector<T> h(in.idx.tokens * in.idx.k);
    indexed_rows_matmul_into(in.x, in.a, in.idx, std::span<T>(h), threads);
    const auto gw = in.gate_weights.values();
    for (std::size_t i = 0; i < h.size(); ++i) h[i] *= gw[i];
    indexed_cols_accumulate_into(std::span<const T>(h), in.b, in.idx, out, threads);
}

template <typename T>
void run_loop(const BenchInputs<T>& in, std::span<T> out, std::size_t /*threads*/) {
    const std::size_t t_count = in.idx.tokens, r = in.a.rows();
    // Dense gate table, the usual input to a per-expert loop.
    TrackedVector<T> gates(t_count * r, T{0});
    for (std::size_t t = 0; t < t_count; ++t)
        for (std::size_t j = 0; j < in.idx.k; ++j) gates[t * r + in.idx(t, j)] += in.gate_weights(t, j);
    loop_per_expert_into(
        in.x, in.a, in.b, [&](std::size_t t, std::size_t e) { return gates[t * r + e]; }, out);
}

// einsum-style: materialise the selected rows of A and columns of B for
// every (token, selection) pair.
template <typename T>
void run_dense(const BenchInputs<T>& in, std::span<T> out, std::size_t threads) {
    const std::size_t t_count = in.idx.tokens, k = in.idx.k, d_in = in.x.cols(), d_out = in.b.rows();
    const std::size_t r = in.b.cols();
    TrackedVector<T> h(t_count * k);
    {
        TrackedVector<T> wa(t_count * k * d_in);
        parallel_for(t_count, threads, [&](std::size_t begin, std::size_t end) {
            for (std::size_t t = begin; t < end; ++t)
                for (std::size_t j = 0; j < k; ++j)
                    std::memcpy(wa.data() + (t * k + j) * d_in, in.a.data() + std::size_t{in.idx(t, j)} * d_in,
                                d_in * sizeof(T));
        });
        parallel_for(t_count, threads, [&](std::size_t begin, std::size_t end) {
            for (std::size_t t = begin; t < end; ++t)
                for (std::size_t j = 0; j < k; ++j)
                    h[t * k + j] = dot_lanes(wa.data() + (t * k + j) * d_in, in.x.data() + t * d_in, d_in) *
                                   in.gate_weights(t, j);
        });
    }
    TrackedVector<T> wb(t_count * k * d_out);
    parallel_for(t_count, threads, [&](std::size_t begin, std::size_t end) {
        for (std::size_t t = begin; t < end; ++t)
            for (std::size_t j = 0; j < k; ++j) {
                T* dst = wb.data() + (t * k + j) * d_out;
                const std::size_t e = in.idx(t, j);
                for (std::size_t i = 0; i < d_out; ++i) dst[i] = in.b.data()[i * r + e];
            }
    });
    parallel_for(t_count, threads, [&](std::size_t begin, std::size_t end) {
        for (std::size_t t = begin; t < end; ++t) {
            T* o = out.data() + t * d_out;
            std::fill(o, o + d_out, T{0});
            for (std::size_t j = 0; j < k; ++j) {
                const T c = h[t * k + j];
                const T* w = wb.data() + (t * k + j) * d_out;
                for (std::size_t i = 0; i < d_out; ++i) o[i] += c * w[i];
            }
        }
    });
}

template <typename T, typename Fn>
KernelReport measure(const char* name, const BenchConfig& c, const BenchInputs<T>& in, Fn&& fn) {
    BasicMatrix<T> out(c.t, c.d);
    std::vector<double> times;
    std::size_t peak_bytes = 0;
    std::uint64_t checksum = 0;
    for (std::size_t rep = 0; rep < c.repeats; ++rep) {
        AllocationCounter::reset_peak();
        const std::size_t base = AllocationCounter::current();
        const auto start = std::chrono::steady_clock::now();
        fn(in, out.values(), c.threads);
        const auto stop = std::chrono::steady_clock::now();
        peak_bytes = std::max(peak_bytes, AllocationCounter::peak() - base);
        times.push_back(std::chrono::duration<double, std::nano>(stop - start).count());
        const auto bytes = std::as_bytes(std::span<const T>(out.values()));
        const std::uint64_t cs = checksum_bytes(bytes);
        if (rep == 0) {
            checksum = cs;
        } else if (cs != checksum) {
            throw std::runtime_error(std::string("bench: non-deterministic output from ") + name);
        }
    }
    std::sort(times.begin(), times.end());
    const double median = times.size() % 2 ? times[times.size() / 2]
                                           : 0.5 * (times[times.size() / 2 - 1] + times[times.size() / 2]);
    KernelReport rep;
    rep.variant = name;
    rep.t = c.t;
    rep.d = c.d;
    rep.r = c.r;
    rep.k = c.k;
    rep.dtype = c.dtype;
    rep.threads = c.threads;
    rep.ns_per_token = median / static_cast<double>(c.t);
    rep.intermediate_bytes = peak_bytes;
    rep.checksum = checksum;
    return rep;
}

template <typename T>
std::vector<KernelReport> bench_typed(const BenchConfig& c) {
    const auto in = make_bench_inputs<T>(c);
    std::vector<KernelReport> reports;
    reports.push_back(measure<T>(kVariantIndexed, c, in, run_indexed<T>));
    reports.push_back(measure<T>(kVariantLoop, c, in, run_loop<T>));
    reports.push_back(measure<T>(kVariantDense, c, in, run_dense<T>));
    return reports;
}

}  // namespace

std::vector<KernelReport> bench_kernels(const BenchConfig& config) {
    config.validate();
    return config.dtype == "f32" ? bench_typed<float>(config) : bench_typed<double>(config);
}

nlohmann::json to_json(const KernelReport& r) {
    char hex[19];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(r.checksum));
    return {{"variant", r.variant},
            {"t", r.t},
            {"d", r.d},
            {"r", r.r},
            {"k", r.k},
            {"dtype", r.dtype},
            {"threads", r.threads},
            {"ns_per_token", r.ns_per_token},
            {"intermediate_bytes", r.intermediate_bytes},
            {"checksum", hex}};
}

nlohmann::json to_json(const std::vector<KernelReport>& reports) {
    auto arr = nlohmann::json::array();
    for (const auto& r : reports) arr.push_back(to_json(r));
    return arr;
}

}  // namespace smora

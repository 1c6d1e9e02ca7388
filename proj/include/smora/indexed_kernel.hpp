// Copyright (c) 2026, The SMoRA Authors
// SPDX-License-Identifier: Apache-2.0
//
// Index-selected low-rank products. Given per-token expert (rank) indices,
// the rows kernel computes only the selected rows of A against each token
// and the columns kernel accumulates only the selected columns of B. No
// t x k x d intermediate is ever formed.
//
// Per-token results are accumulated in ascending selection position, and
// tokens are partitioned across threads without cross-token reductions, so
// results are bit-identical for any thread count.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "smora/numerics.hpp"

namespace smora {

struct IndexBatch {
    std::size_t tokens = 0;
    std::size_t k = 0;
    std::vector<std::uint32_t> idx;  // tokens x k, row-major

    IndexBatch() = default;
    IndexBatch(std::size_t tokens, std::size_t k, std::vector<std::uint32_t> idx);

    [[nodiscard]] std::uint32_t operator()(std::size_t t, std::size_t j) const noexcept { return idx[t * k + j]; }
    [[nodiscard]] std::span<const std::uint32_t> row(std::size_t t) const noexcept {
        return {idx.data() + t * k, k};
    }
    /// Throws std::invalid_argument if any index is >= experts.
    void validate(std::size_t experts) const;
};

/// out[t, j] = dot(a[idx(t, j), :], x[t, :]). x: (t x d), a: (r x d).
template <typename T>
BasicMatrix<T> indexed_rows_matmul(const BasicMatrix<T>& x, const BasicMatrix<T>& a, const IndexBatch& idx,
                                   std::size_t threads = 1);

/// out[t, :] = sum_j h[t, j] * b[:, idx(t, j)]. h: (t x k), b: (d x r).
template <typename T>
BasicMatrix<T> indexed_cols_accumulate(const BasicMatrix<T>& h, const BasicMatrix<T>& b, const IndexBatch& idx,
                                       std::size_t threads = 1);

/// Span-based cores used by the batch forward and the benchmark; `out` must
/// already have the right length. Indices are assumed validated.
template <typename T>
void indexed_rows_matmul_into(const BasicMatrix<T>& x, const BasicMatrix<T>& a, const IndexBatch& idx,
                              std::span<T> out, std::size_t threads);
template <typename T>
void indexed_cols_accumulate_into(std::span<const T> h, const BasicMatrix<T>& b, const IndexBatch& idx,
                                  std::span<T> out, std::size_t threads);

/// Per-expert loop reference: for each expert, gather the tokens routed to
/// it, project them through A's row, scale by the gate and scatter B's
/// column back. `gates` is dense (t x r), zero where unrouted.
template <typename T>
BasicMatrix<T> oracle_loop_per_expert(const BasicMatrix<T>& x, const BasicMatrix<T>& a, const BasicMatrix<T>& b,
                                      const BasicMatrix<T>& gates);

/// Scatters per-selection gate weights (t x k) into a dense (t x r) matrix;
/// duplicate selections add.
template <typename T>
BasicMatrix<T> dense_gates(const IndexBatch& idx, const BasicMatrix<T>& weights, std::size_t experts);

struct BenchConfig {
    std::size_t t = 4096;
    std::size_t d = 1024;
    std::size_t r = 64;
    std::size_t k = 8;
    std::string dtype = "f32";  // "f32" | "f64"
    std::size_t threads = 4;
    std::size_t repeats = 5;
    std::uint64_t seed = 0;

    void validate() const;
};

struct KernelReport {
    std::string variant;
    std::size_t t = 0, d = 0, r = 0, k = 0;
    std::string dtype;
    std::size_t threads = 0;
    double ns_per_token = 0.0;
    std::size_t intermediate_bytes = 0;
    std::uint64_t checksum = 0;
};

inline constexpr const char* kVariantIndexed = "indexed";
inline constexpr const char* kVariantLoop = "loop_per_expert";
inline constexpr const char* kVariantDense = "dense_materialized";

/// Runs the full gated low-rank delta (rows kernel, gate scaling, columns
/// kernel) through the three variants and reports median time per token,
/// peak intermediate bytes and an FNV-1a checksum of the output bytes.
std::vector<KernelReport> bench_kernels(const BenchConfig& config);

/// FNV-1a over raw bytes.
std::uint64_t checksum_bytes(std::span<const std::byte> bytes) noexcept;

nlohmann::json to_json(const KernelReport& report);
nlohmann::json to_json(const std::vector<KernelReport>& reports);

}  // namespace smora

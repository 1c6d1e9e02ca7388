// Copyright (c) 2026, The SMoRA Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <chrono>
#include <thread>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "smora/indexed_kernel.hpp"
#include "smora/parallel.hpp"
#include "support.hpp"

using namespace smora;

namespace {

IndexBatch random_indices(std::size_t t, std::size_t k, std::size_t r, Rng& rng) {
    std::vector<std::uint32_t> idx(t * k);
    for (auto& i : idx) i = static_cast<std::uint32_t>(rng.below(r));
    return {t, k, std::move(idx)};
}

Matrix gather_rows_oracle(const Matrix& x, const Matrix& a, const IndexBatch& idx) {
    const Matrix full = dense_matmul(x, transpose(a));
    Matrix out(idx.tokens, idx.k);
    for (std::size_t t = 0; t < idx.tokens; ++t)
        for (std::size_t j = 0; j < idx.k; ++j) out(t, j) = full(t, idx(t, j));
    return out;
}

Matrix cols_oracle(const Matrix& h, const Matrix& b, const IndexBatch& idx) {
    // dense (t x r) coefficient table times b^T
    const Matrix coef = dense_gates(idx, h, b.cols());
    return dense_matmul(coef, transpose(b));
}

std::uint64_t checksum(const Matrix& m) {
    return checksum_bytes(std::as_bytes(m.values()));
}

}  // namespace

TEST_SUITE("indexed_kernel") {

TEST_CASE("rows kernel examples") {
    const Matrix x = Matrix::from_rows({{1, 2}});
    const Matrix a = Matrix::from_rows({{1, 0}, {0, 1}, {1, 1}});
    CHECK(indexed_rows_matmul(x, a, IndexBatch(1, 2, {2, 0})) == Matrix::from_rows({{3, 1}}));

    Rng rng(1);
    const Matrix xs = normal_init(5, 4, 1.0, rng);
    for (std::uint32_t j = 0; j < 4; ++j) {
        const Matrix out = indexed_rows_matmul(xs, Matrix::identity(4), IndexBatch(5, 1, std::vector<std::uint32_t>(5, j)));
        for (std::size_t t = 0; t < 5; ++t) CHECK(out(t, 0) == xs(t, j));
    }
}

TEST_CASE("cols kernel examples") {
    const Matrix b = Matrix::from_rows({{1, 0, 5}, {0, 1, 5}});
    CHECK(indexed_cols_accumulate(Matrix::from_rows({{2, 3}}), b, IndexBatch(1, 2, {2, 0})) ==
          Matrix::from_rows({{13, 10}}));
    CHECK(indexed_cols_accumulate(Matrix(1, 2), b, IndexBatch(1, 2, {2, 0})) == Matrix(1, 2));
    CHECK(indexed_cols_accumulate(Matrix::from_rows({{1, 1}}), b, IndexBatch(1, 2, {0, 0})) ==
          Matrix::from_rows({{2, 0}}));
}

TEST_CASE("index validation happens before compute") {
    const Matrix x(2, 3), a(4, 3), b(3, 4), h(2, 2);
    const IndexBatch bad(2, 2, {0, 1, 4, 0});
    CHECK_THROWS_AS(indexed_rows_matmul(x, a, bad), std::invalid_argument);
    CHECK_THROWS_AS(indexed_cols_accumulate(h, b, bad), std::invalid_argument);
    CHECK_THROWS_AS(IndexBatch(2, 2, {0, 1, 2}), std::invalid_argument);
    CHECK_THROWS_AS(indexed_rows_matmul(Matrix(2, 2), a, IndexBatch(2, 2, {0, 1, 2, 3})), std::invalid_argument);
}

TEST_CASE("kernels match the dense oracle on random shapes") {
    Rng rng(2);
    double worst_rows = 0, worst_cols = 0;
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t t = trial % 5 == 0 ? 1 : 1 + rng.below(40);
        const std::size_t r = 1 + rng.below(16), d = 1 + rng.below(24);
        const std::size_t k = trial % 4 == 0 ? 1 : trial % 4 == 1 ? r : 1 + rng.below(r);
        const IndexBatch idx = random_indices(t, k, r, rng);  // duplicates allowed
        const Matrix x = normal_init(t, d, 1.0, rng), a = normal_init(r, d, 1.0, rng);
        const Matrix h = normal_init(t, k, 1.0, rng), b = normal_init(d, r, 1.0, rng);
        const std::size_t threads = 1 + rng.below(4);
        worst_rows = std::max(worst_rows, max_abs_diff(indexed_rows_matmul(x, a, idx, threads),
                                                       gather_rows_oracle(x, a, idx)));
        worst_cols = std::max(worst_cols, max_abs_diff(indexed_cols_accumulate(h, b, idx, threads),
                                                       cols_oracle(h, b, idx)));
    }
    CHECK(worst_rows <= 1e-12);
    CHECK(worst_cols <= 1e-12);
}

TEST_CASE("results are bit-identical across thread counts") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t t = 1 + rng.below(300), r = 1 + rng.below(32), d = 1 + rng.below(64);
        const std::size_t k = 1 + rng.below(r);
        const IndexBatch idx = random_indices(t, k, r, rng);
        const Matrix x = normal_init(t, d, 1.0, rng), a = normal_init(r, d, 1.0, rng);
        const Matrix b = normal_init(d, r, 1.0, rng);
        const Matrix h1 = indexed_rows_matmul(x, a, idx, 1);
        const Matrix y1 = indexed_cols_accumulate(h1, b, idx, 1);
        for (std::size_t threads : {2, 8}) {
            const Matrix h = indexed_rows_matmul(x, a, idx, threads);
            CHECK(checksum(h) == checksum(h1));
            CHECK(checksum(indexed_cols_accumulate(h, b, idx, threads)) == checksum(y1));
        }
    }
}

TEST_CASE("loop-per-expert oracle matches the indexed pipeline") {
    Rng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t t = 1 + rng.below(20), r = 1 + rng.below(10), d = 1 + rng.below(12);
        const std::size_t k = 1 + rng.below(r);
        const IndexBatch idx = random_indices(t, k, r, rng);
        const Matrix x = normal_init(t, d, 1.0, rng), a = normal_init(r, d, 1.0, rng);
        const Matrix b = normal_init(d, r, 1.0, rng), w = normal_init(t, k, 1.0, rng);
        Matrix h = indexed_rows_matmul(x, a, idx);
        for (std::size_t i = 0; i < h.size(); ++i) h.values()[i] *= w.values()[i];
        const Matrix indexed = indexed_cols_accumulate(h, b, idx);
        CHECK(max_abs_diff(oracle_loop_per_expert(x, a, b, dense_gates(idx, w, r)), indexed) <= 1e-12);
    }
}

TEST_CASE("loop oracle degenerate cases") {
    Rng rng(5);
    const Matrix x = normal_init(4, 3, 1.0, rng), a = normal_init(1, 3, 1.0, rng), b = normal_init(3, 1, 1.0, rng);
    const Matrix g = normal_init(4, 1, 1.0, rng);
    const Matrix out = oracle_loop_per_expert(x, a, b, g);
    for (std::size_t t = 0; t < 4; ++t) {
        const double s = g(t, 0) * dot(a.row(0), x.row(t));
        for (std::size_t i = 0; i < 3; ++i) CHECK(out(t, i) == doctest::Approx(s * b(i, 0)));
    }
    CHECK(oracle_loop_per_expert(x, a, b, Matrix(4, 1)) == Matrix(4, 3));
}

TEST_CASE("token permutation permutes the output") {
    Rng rng(6);
    const std::size_t t = 17, r = 8, d = 9, k = 3;
    const IndexBatch idx = random_indices(t, k, r, rng);
    const Matrix x = normal_init(t, d, 1.0, rng), a = normal_init(r, d, 1.0, rng);
    std::vector<std::size_t> perm(t);
    for (std::size_t i = 0; i < t; ++i) perm[i] = (i * 5 + 3) % t;
    Matrix px(t, d);
    std::vector<std::uint32_t> pidx(t * k);
    for (std::size_t i = 0; i < t; ++i) {
        std::copy_n(x.row(perm[i]).begin(), d, px.row(i).begin());
        for (std::size_t j = 0; j < k; ++j) pidx[i * k + j] = idx(perm[i], j);
    }
    const Matrix out = indexed_rows_matmul(x, a, idx);
    const Matrix pout = indexed_rows_matmul(px, a, IndexBatch(t, k, pidx));
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < k; ++j) CHECK(pout(i, j) == out(perm[i], j));
}

TEST_CASE("float kernels agree with double within float precision") {
    Rng rng(7);
    const std::size_t t = 10, r = 6, d = 16, k = 3;
    const IndexBatch idx = random_indices(t, k, r, rng);
    const Matrix x = normal_init(t, d, 1.0, rng), a = normal_init(r, d, 1.0, rng);
    MatrixF xf(t, d), af(r, d);
    for (std::size_t i = 0; i < x.size(); ++i) xf.values()[i] = static_cast<float>(x.values()[i]);
    for (std::size_t i = 0; i < a.size(); ++i) af.values()[i] = static_cast<float>(a.values()[i]);
    const Matrix ref = indexed_rows_matmul(x, a, idx);
    const MatrixF out = indexed_rows_matmul(xf, af, idx);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(out.values()[i] == doctest::Approx(ref.values()[i]).epsilon(1e-4));
}

TEST_CASE("bench reports are well formed and consistent") {
    BenchConfig c;
    c.t = 64;
    c.d = 48;
    c.r = 16;
    c.k = 4;
    c.threads = 2;
    c.repeats = 3;
    for (const char* dtype : {"f32", "f64"}) {
        c.dtype = dtype;
        const auto reports = bench_kernels(c);
        REQUIRE(reports.size() == 3);
        CHECK(reports[0].variant == kVariantIndexed);
        CHECK(reports[1].variant == kVariantLoop);
        CHECK(reports[2].variant == kVariantDense);
        for (const auto& r : reports) {
            CHECK(r.checksum == reports[0].checksum);
            CHECK(r.ns_per_token > 0.0);
            CHECK(r.t == 64);
            CHECK(r.dtype == dtype);
        }
        // t x k gate products only, against t x k x d copies
        const std::size_t elem = c.dtype == "f32" ? 4 : 8;
        CHECK(reports[0].intermediate_bytes == c.t * c.k * elem);
        CHECK(reports[2].intermediate_bytes >= c.t * c.k * c.d * elem);
        const auto again = bench_kernels(c);
        for (std::size_t i = 0; i < 3; ++i) CHECK(again[i].checksum == reports[i].checksum);
    }
}

TEST_CASE("indexed intermediates do not grow with d") {
    BenchConfig c;
    c.t = 32;
    c.r = 8;
    c.k = 2;
    c.threads = 1;
    c.repeats = 1;
    c.d = 16;
    const std::size_t small = bench_kernels(c)[0].intermediate_bytes;
    c.d = 256;
    CHECK(bench_kernels(c)[0].intermediate_bytes == small);
}

TEST_CASE("bench degenerate size and json schema") {
    BenchConfig c;
    c.t = 1;
    c.d = 3;
    c.r = 1;
    c.k = 1;
    c.threads = 1;
    c.repeats = 1;
    const auto reports = bench_kernels(c);
    for (const auto& r : reports) CHECK(r.checksum == reports[0].checksum);
    const nlohmann::json j = to_json(reports);
    REQUIRE(j.is_array());
    REQUIRE(j.size() == 3);
    for (const char* key : {"variant", "t", "d", "r", "k", "dtype", "threads", "ns_per_token", "intermediate_bytes",
                            "checksum"})
        CHECK(j[0].contains(key));
}

TEST_CASE("bench config validation") {
    BenchConfig c;
    c.threads = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = BenchConfig{};
    c.k = c.r + 1;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = BenchConfig{};
    c.dtype = "f16";
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = BenchConfig{};
    c.repeats = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("throughput scales with threads" * doctest::skip(std::thread::hardware_concurrency() < 2)) {
    const std::size_t cores = std::thread::hardware_concurrency();
    const std::size_t t_max = std::min<std::size_t>(cores, 4);
    Rng rng(8);
    const std::size_t t = 4096, d = 1024, r = 64, k = 8;
    const IndexBatch idx = random_indices(t, k, r, rng);
    MatrixF x(t, d), a(r, d);
    for (float& v : x.values()) v = static_cast<float>(rng.normal());
    for (float& v : a.values()) v = static_cast<float>(rng.normal());
    auto time = [&](std::size_t threads) {
        double best = 1e300;
        for (int rep = 0; rep < 3; ++rep) {
            const auto s = std::chrono::steady_clock::now();
            const MatrixF h = indexed_rows_matmul(x, a, idx, threads);
            best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - s).count());
            CHECK(h.rows() == t);
        }
        return best;
    };
    const double one = time(1);
    CHECK(one / time(t_max) >= static_cast<double>(t_max) / 2.0);
}

TEST_CASE("allocation counter tracks live and peak bytes") {
    AllocationCounter::reset_peak();
    const std::size_t base = AllocationCounter::current();
    {
        TrackedVector<double> v(100);
        CHECK(AllocationCounter::current() - base == 800);
    }
    CHECK(AllocationCounter::current() == base);
    CHECK(AllocationCounter::peak() - base == 800);
}

TEST_CASE("parallel_for covers the range and rethrows") {
    std::vector<int> hit(1000, 0);
    parallel_for(hit.size(), 7, [&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) ++hit[i];
    });
    CHECK(std::all_of(hit.begin(), hit.end(), [](int h) { return h == 1; }));
    CHECK_THROWS_AS(parallel_for(10, 3,
                                 [](std::size_t b, std::size_t) {
                                     if (b > 0) throw std::runtime_error("worker");
                                 }),
                    std::runtime_error);
}

}

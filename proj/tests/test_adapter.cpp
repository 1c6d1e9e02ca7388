// Copyright (c) 2026, The SMoRA Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <doctest.h>

#include "smora/adapter.hpp"
#include "support.hpp"

using namespace smora;

namespace {

SmoraLayer hand_layer() {
    SmoraLayer l;
    l.w0 = Matrix(2, 2);
    l.lora.a = Matrix::identity(2);
    l.lora.b = Matrix::identity(2);
    l.router.w_g = Matrix::from_rows({{1, 0}, {0, 0}});
    l.router.bias = {0, 0};
    l.k = 1;
    return l;
}

}  // namespace

TEST_SUITE("adapter") {

TEST_CASE("lora_forward examples") {
    LoraParams p;
    p.a = Matrix::identity(2);
    p.b = Matrix::identity(2);
    CHECK(lora_forward(Matrix::identity(2), p, Vector{1, 2}) == Vector{2, 4});

    Rng rng(1);
    const Matrix w0 = normal_init(3, 4, 1.0, rng);
    const Vector x = test::random_vector(4, rng);
    LoraParams z = LoraParams::init(2, 4, 3, rng);
    CHECK(lora_forward(w0, z, x) == matvec(w0, x));
    z.b = normal_init(3, 2, 1.0, rng);
    z.scaling = 0.0;
    CHECK(lora_forward(w0, z, x) == matvec(w0, x));
}

TEST_CASE("lora init and validation") {
    Rng rng(2);
    const LoraParams p = LoraParams::init(4, 6, 5, rng);
    CHECK(p.a.rows() == 4);
    CHECK(p.a.cols() == 6);
    CHECK(p.b == Matrix(5, 4));
    CHECK_THROWS_AS(LoraParams::init(0, 6, 5, rng), std::invalid_argument);
    CHECK_THROWS_AS(lora_forward(Matrix(5, 6), p, Vector(5)), std::invalid_argument);
}

TEST_CASE("smora_forward hand example") {
    const SmoraForward f = smora_forward(hand_layer(), Vector{1, 2});
    CHECK(f.cache.decision.indices == std::vector<std::size_t>{0});
    CHECK(f.cache.decision.weights == Vector{1.0});
    CHECK(f.y == Vector{1, 0});
}

TEST_CASE("gate-bypassed forward is lora_forward bit for bit") {
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t din = 1 + rng.below(10), dout = 1 + rng.below(10), r = 1 + rng.below(10);
        const SmoraLayer l = test::random_layer(din, dout, r, 1 + rng.below(r), rng);
        const Vector x = test::random_vector(din, rng);
        CHECK(smora_forward_gate_bypassed(l, x) == lora_forward(l.w0, l.lora, x));
    }
}

TEST_CASE("forward matches the dense oracle") {
    Rng rng(4);
    double worst = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t din = 1 + rng.below(12), dout = 1 + rng.below(12), r = 1 + rng.below(12);
        const std::size_t k = trial % 3 == 0 ? 1 : trial % 3 == 1 ? r : 1 + rng.below(r);
        const SmoraLayer l = test::random_layer(din, dout, r, k, rng);
        const Vector x = test::random_vector(din, rng);
        worst = std::max(worst, max_abs_diff(smora_forward(l, x).y, smora_forward_dense_oracle(l, x)));
    }
    CHECK(worst <= 1e-12);
}

TEST_CASE("dense oracle with uniform scores and k = r") {
    Rng rng(5);
    SmoraLayer l = test::random_layer(5, 4, 6, 6, rng);
    l.router.w_g.fill(0.0);
    l.router.bias.assign(6, 0.0);
    const Vector x = test::random_vector(5, rng);
    Vector expect = matvec(l.w0, x);
    const Vector ba = matvec(l.lora.b, matvec(l.lora.a, x));
    axpy(l.lora.scaling / 6.0, ba, expect);
    CHECK(max_abs_diff(smora_forward_dense_oracle(l, x), expect) <= 1e-12);

    l.lora.b.fill(0.0);
    CHECK(smora_forward_dense_oracle(l, x) == matvec(l.w0, x));
}

TEST_CASE("zero B returns the base output and gives no router gradient") {
    Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t din = 1 + rng.below(8), dout = 1 + rng.below(8), r = 1 + rng.below(8);
        const SmoraLayer l = SmoraLayer::init(normal_init(dout, din, 1.0, rng), r, 1 + rng.below(r), rng);
        const Vector x = test::random_vector(din, rng);
        const SmoraForward f = smora_forward(l, x);
        CHECK(f.y == matvec(l.w0, x));
        const SmoraGrads g = smora_backward(l, f.cache, test::random_vector(dout, rng));
        for (double v : g.d_wg.values()) CHECK(v == 0.0);
        for (double v : g.d_a.values()) CHECK(v == 0.0);
    }
}

TEST_CASE("backward matches central differences") {
    Rng rng(7);
    test::FdResult total;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t din = 1 + rng.below(8), dout = 1 + rng.below(8), r = 2 + rng.below(5);
        const std::size_t k = trial % 3 == 0 ? 1 : trial % 3 == 1 ? r / 2 : r;
        SmoraLayer l = test::random_layer(din, dout, r, k, rng);
        Vector x = test::random_vector(din, rng);
        const Vector c = test::random_vector(dout, rng);
        const SmoraForward f = smora_forward(l, x);
        const SmoraGrads g = smora_backward(l, f.cache, c);
        const auto sel = f.cache.decision.indices;
        auto loss = [&] { return dot(c, smora_forward(l, x).y); };
        auto stable = [&] { return smora_forward(l, x).cache.decision.indices == sel; };
        test::merge(total, test::fd_check(l.lora.a.values(), g.d_a.values(), loss, stable));
        test::merge(total, test::fd_check(l.lora.b.values(), g.d_b.values(), loss, stable));
        test::merge(total, test::fd_check(l.router.w_g.values(), g.d_wg.values(), loss, stable));
        test::merge(total, test::fd_check(x, g.d_x, loss, stable));
        // The bias never receives a gradient; perturbing it changes the loss only through selection.
        const double before = loss();
        for (double& b : l.router.bias) b += 1e-7;
        if (stable()) CHECK(loss() == before);
    }
    CHECK(total.max_rel < 1e-5);
    CHECK(total.checked > total.skipped * 10);
}

TEST_CASE("backward is linear in dy and zero for dy = 0") {
    Rng rng(8);
    const SmoraLayer l = test::random_layer(6, 5, 8, 3, rng);
    const Vector x = test::random_vector(6, rng);
    const SmoraForward f = smora_forward(l, x);
    const Vector dy = test::random_vector(5, rng);
    Vector dy2 = dy;
    for (double& v : dy2) v *= 2.5;
    const SmoraGrads g1 = smora_backward(l, f.cache, dy);
    const SmoraGrads g2 = smora_backward(l, f.cache, dy2);
    CHECK(max_abs_diff(scaled(g1.d_a, 2.5), g2.d_a) <= 1e-12);
    CHECK(max_abs_diff(scaled(g1.d_b, 2.5), g2.d_b) <= 1e-12);
    CHECK(max_abs_diff(scaled(g1.d_wg, 2.5), g2.d_wg) <= 1e-12);

    const SmoraGrads z = smora_backward(l, f.cache, Vector(5, 0.0));
    for (double v : z.d_a.values()) CHECK(v == 0.0);
    for (double v : z.d_b.values()) CHECK(v == 0.0);
    for (double v : z.d_wg.values()) CHECK(v == 0.0);
}

TEST_CASE("unselected ranks get exactly zero gradient") {
    Rng rng(9);
    const std::size_t r = 12;
    const SmoraLayer l = test::random_layer(5, 4, r, 2, rng);
    SmoraGrads acc = SmoraGrads::zeros(l);
    std::vector<bool> used(r, false);
    for (int t = 0; t < 3; ++t) {
        const SmoraForward f = smora_forward(l, test::random_vector(5, rng));
        for (auto i : f.cache.decision.indices) used[i] = true;
        smora_backward_accumulate(l, f.cache, test::random_vector(4, rng), acc);
    }
    std::size_t unused = 0;
    for (std::size_t i = 0; i < r; ++i) {
        if (used[i]) continue;
        ++unused;
        for (double v : acc.d_a.row(i)) CHECK(v == 0.0);
        for (std::size_t o = 0; o < 4; ++o) CHECK(acc.d_b(o, i) == 0.0);
        for (double v : acc.d_wg.row(i)) CHECK(v == 0.0);
    }
    CHECK(unused > 0);
}

TEST_CASE("block routing matches an explicit expanded gate") {
    Rng rng(10);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t block = 1 + rng.below(4), n = 1 + rng.below(6), k = 1 + rng.below(n);
        const SmoraLayer l = test::random_layer(5, 3, block * n, k, rng, block);
        CHECK(l.experts() == n);
        const Vector x = test::random_vector(5, rng);
        CHECK(max_abs_diff(smora_forward(l, x).y, smora_forward_dense_oracle(l, x)) <= 1e-12);
    }
}

TEST_CASE("block routing backward matches central differences") {
    Rng rng(11);
    test::FdResult total;
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t block = 2 + rng.below(3), n = 2 + rng.below(3), k = 1 + rng.below(n);
        SmoraLayer l = test::random_layer(4, 3, block * n, k, rng, block);
        Vector x = test::random_vector(4, rng);
        const Vector c = test::random_vector(3, rng);
        const SmoraForward f = smora_forward(l, x);
        const SmoraGrads g = smora_backward(l, f.cache, c);
        const auto sel = f.cache.decision.indices;
        auto loss = [&] { return dot(c, smora_forward(l, x).y); };
        auto stable = [&] { return smora_forward(l, x).cache.decision.indices == sel; };
        test::merge(total, test::fd_check(l.lora.a.values(), g.d_a.values(), loss, stable));
        test::merge(total, test::fd_check(l.lora.b.values(), g.d_b.values(), loss, stable));
        test::merge(total, test::fd_check(l.router.w_g.values(), g.d_wg.values(), loss, stable));
        test::merge(total, test::fd_check(x, g.d_x, loss, stable));
    }
    CHECK(total.max_rel < 1e-5);
}

TEST_CASE("bias_in_weights backward matches central differences") {
    Rng rng(12);
    test::FdResult total;
    for (int trial = 0; trial < 20; ++trial) {
        SmoraLayer l = test::random_layer(4, 3, 6, 3, rng);
        l.bias_in_weights = true;
        Vector x = test::random_vector(4, rng);
        const Vector c = test::random_vector(3, rng);
        const SmoraForward f = smora_forward(l, x);
        const SmoraGrads g = smora_backward(l, f.cache, c);
        const auto sel = f.cache.decision.indices;
        auto loss = [&] { return dot(c, smora_forward(l, x).y); };
        auto stable = [&] { return smora_forward(l, x).cache.decision.indices == sel; };
        test::merge(total, test::fd_check(l.router.w_g.values(), g.d_wg.values(), loss, stable));
        test::merge(total, test::fd_check(x, g.d_x, loss, stable));
    }
    CHECK(total.max_rel < 1e-5);
}

TEST_CASE("batched forward equals the per-token forward") {
    Rng rng(13);
    SmoraLayer l = test::random_layer(7, 5, 10, 3, rng);
    const Matrix x = normal_init(33, 7, 1.0, rng);
    for (std::size_t threads : {1, 2, 3}) {
        const Matrix y = smora_forward_batch(l, x, threads);
        for (std::size_t t = 0; t < x.rows(); ++t) {
            const Vector ref = smora_forward(l, x.row(t)).y;
            CHECK(max_abs_diff(y.row(t), ref) <= 1e-12);
        }
    }
}

TEST_CASE("smora layer validation") {
    Rng rng(14);
    CHECK_THROWS_AS(SmoraLayer::init(Matrix(3, 3), 4, 5, rng), std::invalid_argument);
    CHECK_THROWS_AS(SmoraLayer::init(Matrix(3, 3), 4, 0, rng), std::invalid_argument);
    CHECK_THROWS_AS(SmoraLayer::init(Matrix(3, 3), 0, 1, rng), std::invalid_argument);
    CHECK_THROWS_AS(SmoraLayer::init(Matrix(3, 3), 6, 1, rng, 4), std::invalid_argument);
    const SmoraLayer l = test::random_layer(3, 3, 4, 2, rng);
    CHECK_THROWS_AS(smora_forward(l, Vector(2)), std::invalid_argument);
}

TEST_CASE("parameter counts") {
    Rng rng(15);
    const LoraParams p = LoraParams::init(8, 4, 4, rng);
    CHECK(count_params(p).trainable == 64);
    CHECK(count_params(p).active_per_token == 64);

    const std::size_t d = 32;
    const SmoraLayer s = SmoraLayer::init(Matrix(d, d), 64, 8, rng);
    const ParamCount c = count_params(s);
    CHECK(c.active_adapter == 8 * (d + d));
    CHECK(c.router == 64 * d + 64);
    CHECK(c.active_per_token == 8 * (d + d) + 64 * d + 64);
    const LoraParams l64 = LoraParams::init(64, d, d, rng);
    CHECK(c.active_adapter < count_params(l64).active_adapter);
    // MoE top-1 over 8 experts routes with an 8 x d router
    CHECK(c.router > 8 * d);
}

}

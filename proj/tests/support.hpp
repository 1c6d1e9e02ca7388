// Copyright (c) 2026, The SMoRA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "smora/adapter.hpp"
#include "smora/numerics.hpp"

namespace smora::test {

inline Vector random_vector(std::size_t n, Rng& rng, double scale = 1.0) {
    Vector v(n);
    for (double& x : v) x = scale * rng.normal();
    return v;
}

/// Random layer with a nonzero B so every gradient path is exercised.
inline SmoraLayer random_layer(std::size_t d_in, std::size_t d_out, std::size_t rank, std::size_t k, Rng& rng,
                               std::size_t block = 1) {
    SmoraLayer l = SmoraLayer::init(normal_init(d_out, d_in, 0.5, rng), rank, k, rng, block, 0.01);
    l.lora.b = normal_init(d_out, rank, 1.0, rng);
    l.lora.scaling = 0.7;
    for (double& b : l.router.bias) b = 0.1 * rng.normal();
    return l;
}

/// |a - n| / max(|a|, |n|, floor)
inline double rel_err(double a, double n, double floor = 1e-3) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

struct FdResult {
    double max_rel = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0;
};

/// Central differences of `loss` with respect to every entry of `param`,
/// compared against `analytic`. `stable` (optional) must return false when
/// a perturbation changes a discrete routing choice; such entries are
/// skipped and counted.
inline FdResult fd_check(std::span<double> param, std::span<const double> analytic, const std::function<double()>& loss,
                         const std::function<bool()>& stable = {}, double h = 1e-5) {
    FdResult r;
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double orig = param[i];
        param[i] = orig + h;
        const double lp = loss();
        const bool sp = !stable || stable();
        param[i] = orig - h;
        const double lm = loss();
        const bool sm = !stable || stable();
        param[i] = orig;
        if (!sp || !sm) {
            ++r.skipped;
            continue;
        }
        r.max_rel = std::max(r.max_rel, rel_err(analytic[i], (lp - lm) / (2 * h)));
        ++r.checked;
    }
    return r;
}

inline void merge(FdResult& into, const FdResult& r) {
    into.max_rel = std::max(into.max_rel, r.max_rel);
    into.checked += r.checked;
    into.skipped += r.skipped;
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
inline Vector symmetric_eigenvalues(Matrix a) {
    const std::size_t n = a.rows();
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
        if (off < 1e-22) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                if (std::abs(a(p, q)) < 1e-300) continue;
                const double theta = (a(q, q) - a(p, p)) / (2 * a(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
                const double c = 1 / std::sqrt(t * t + 1), s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
            }
        }
    }
    Vector ev(n);
    for (std::size_t i = 0; i < n; ++i) ev[i] = a(i, i);
    return ev;
}

}  // namespace smora::test

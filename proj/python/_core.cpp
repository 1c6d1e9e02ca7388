// Copyright (c) 2026, The SMoRA Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "smora/analysis.hpp"
#include "smora/equivalence.hpp"
#include "smora/indexed_kernel.hpp"
#include "smora/routing.hpp"

namespace py = pybind11;
using namespace smora;

namespace {

using F64Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Matrix to_matrix(const F64Array& arr, const char* name) {
    if (arr.ndim() != 2) throw std::invalid_argument(std::string(name) + " must be 2-D");
    const auto r = static_cast<std::size_t>(arr.shape(0)), c = static_cast<std::size_t>(arr.shape(1));
    return Matrix(r, c, std::vector<double>(arr.data(), arr.data() + r * c));
}

Vector to_vector(const F64Array& arr, const char* name) {
    if (arr.ndim() != 1) throw std::invalid_argument(std::string(name) + " must be 1-D");
    return Vector(arr.data(), arr.data() + arr.size());
}

py::array_t<double> from_matrix(const Matrix& m) {
    py::array_t<double> out(std::vector<py::ssize_t>{static_cast<py::ssize_t>(m.rows()), static_cast<py::ssize_t>(m.cols())});
    std::copy(m.values().begin(), m.values().end(), out.mutable_data());
    return out;
}

py::array_t<double> from_vector(const Vector& v) {
    py::array_t<double> out(std::vector<py::ssize_t>{static_cast<py::ssize_t>(v.size())});
    std::copy(v.begin(), v.end(), out.mutable_data());
    return out;
}

IndexBatch to_index(const py::array_t<std::int64_t, py::array::c_style | py::array::forcecast>& idx) {
    if (idx.ndim() != 2) throw std::invalid_argument("idx must be 2-D (tokens x k)");
    std::vector<std::uint32_t> flat;
    flat.reserve(idx.size());
    for (py::ssize_t i = 0; i < idx.size(); ++i) {
        const auto v = idx.data()[i];
        if (v < 0 || v > static_cast<std::int64_t>(UINT32_MAX)) throw std::invalid_argument("idx entries must be nonnegative");
        flat.push_back(static_cast<std::uint32_t>(v));
    }
    return IndexBatch(static_cast<std::size_t>(idx.shape(0)), static_cast<std::size_t>(idx.shape(1)), std::move(flat));
}

SmoraLayer make_layer(const F64Array& w0, const F64Array& a, const F64Array& b, const F64Array& w_g,
                      const F64Array& bias, std::size_t k, double scaling, std::size_t block, bool bias_in_weights) {
    SmoraLayer l;
    l.w0 = to_matrix(w0, "w0");
    l.lora = {to_matrix(a, "a"), to_matrix(b, "b"), scaling};
    l.router.w_g = to_matrix(w_g, "w_g");
    l.router.bias = to_vector(bias, "bias");
    l.k = k;
    l.block = block;
    l.bias_in_weights = bias_in_weights;
    l.validate();
    return l;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "SMoRA core operations";

    m.def("softmax", [](const F64Array& v) { return from_vector(softmax(to_vector(v, "v"))); }, py::arg("v"));
    m.def("top_k_indices", [](const F64Array& v, std::size_t k) { return top_k_indices(to_vector(v, "v"), k); },
          py::arg("v"), py::arg("k"));

    m.def(
        "gate",
        [](const F64Array& w_g, const F64Array& bias, const F64Array& x, std::size_t k, bool bias_in_weights) {
            RouterParams r{to_matrix(w_g, "w_g"), to_vector(bias, "bias"), kDefaultUpdateRate};
            const GateDecision d = gate(r, to_vector(x, "x"), k, bias_in_weights);
            return py::make_tuple(d.indices, from_vector(d.weights));
        },
        py::arg("w_g"), py::arg("bias"), py::arg("x"), py::arg("k"), py::arg("bias_in_weights") = false);

    m.def(
        "update_bias",
        [](const F64Array& bias, const std::vector<std::uint64_t>& counts, double u) {
            RouterParams r{Matrix(counts.size(), 1), to_vector(bias, "bias"), u};
            RoutingStats st(counts.size(), 1);
            st.counts = counts;
            st.total_tokens = std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
            return from_vector(update_bias(r, st));
        },
        py::arg("bias"), py::arg("counts"), py::arg("u"));

    m.def(
        "max_vio",
        [](const std::vector<std::uint64_t>& counts) {
            RoutingStats st(counts.size(), 1);
            st.counts = counts;
            st.total_tokens = std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
            return max_vio(st);
        },
        py::arg("counts"));

    m.def(
        "lora_forward",
        [](const F64Array& w0, const F64Array& a, const F64Array& b, const F64Array& x, double scaling) {
            return from_vector(
                lora_forward(to_matrix(w0, "w0"), {to_matrix(a, "a"), to_matrix(b, "b"), scaling}, to_vector(x, "x")));
        },
        py::arg("w0"), py::arg("a"), py::arg("b"), py::arg("x"), py::arg("scaling") = 1.0);

    m.def(
        "smora_forward",
        [](const F64Array& w0, const F64Array& a, const F64Array& b, const F64Array& w_g, const F64Array& bias,
           const F64Array& x, std::size_t k, double scaling, std::size_t block, bool bias_in_weights) {
            const SmoraLayer l = make_layer(w0, a, b, w_g, bias, k, scaling, block, bias_in_weights);
            const SmoraForward f = smora_forward(l, to_vector(x, "x"));
            return py::make_tuple(from_vector(f.y), f.cache.decision.indices, from_vector(f.cache.decision.weights));
        },
        py::arg("w0"), py::arg("a"), py::arg("b"), py::arg("w_g"), py::arg("bias"), py::arg("x"), py::arg("k"),
        py::arg("scaling") = 1.0, py::arg("block") = 1, py::arg("bias_in_weights") = false);

    m.def(
        "smora_forward_dense_oracle",
        [](const F64Array& w0, const F64Array& a, const F64Array& b, const F64Array& w_g, const F64Array& bias,
           const F64Array& x, std::size_t k, double scaling, std::size_t block, bool bias_in_weights) {
            const SmoraLayer l = make_layer(w0, a, b, w_g, bias, k, scaling, block, bias_in_weights);
            return from_vector(smora_forward_dense_oracle(l, to_vector(x, "x")));
        },
        py::arg("w0"), py::arg("a"), py::arg("b"), py::arg("w_g"), py::arg("bias"), py::arg("x"), py::arg("k"),
        py::arg("scaling") = 1.0, py::arg("block") = 1, py::arg("bias_in_weights") = false);

    m.def(
        "indexed_rows_matmul",
        [](const F64Array& x, const F64Array& a, const py::array_t<std::int64_t, py::array::c_style | py::array::forcecast>& idx,
           std::size_t threads) {
            const Matrix xm = to_matrix(x, "x"), am = to_matrix(a, "a");
            const IndexBatch ib = to_index(idx);
            py::gil_scoped_release release;
            Matrix out = indexed_rows_matmul(xm, am, ib, threads);
            py::gil_scoped_acquire acquire;
            return from_matrix(out);
        },
        py::arg("x"), py::arg("a"), py::arg("idx"), py::arg("threads") = 1);

    m.def(
        "indexed_cols_accumulate",
        [](const F64Array& h, const F64Array& b, const py::array_t<std::int64_t, py::array::c_style | py::array::forcecast>& idx,
           std::size_t threads) {
            const Matrix hm = to_matrix(h, "h"), bm = to_matrix(b, "b");
            const IndexBatch ib = to_index(idx);
            py::gil_scoped_release release;
            Matrix out = indexed_cols_accumulate(hm, bm, ib, threads);
            py::gil_scoped_acquire acquire;
            return from_matrix(out);
        },
        py::arg("h"), py::arg("b"), py::arg("idx"), py::arg("threads") = 1);

    m.def(
        "check_equivalence",
        [](const std::vector<std::pair<F64Array, F64Array>>& experts, const F64Array& gates, const F64Array& w0,
           const F64Array& x) {
            std::vector<LoraParams> ex;
            for (const auto& [a, b] : experts) ex.push_back({to_matrix(a, "a"), to_matrix(b, "b"), 1.0});
            return check_equivalence(ex, to_vector(gates, "gates"), to_matrix(w0, "w0"), to_vector(x, "x"));
        },
        py::arg("experts"), py::arg("gates"), py::arg("w0"), py::arg("x"));

    m.def(
        "run_equivalence_suite",
        [](std::size_t trials, std::size_t max_n, std::size_t max_rank, std::size_t max_dim, std::uint64_t seed,
           double tolerance) {
            const EquivalenceReport r = run_equivalence_suite({trials, max_n, max_rank, max_dim, seed, tolerance});
            py::dict d;
            d["trials"] = r.trials;
            d["max_diff"] = r.max_diff;
            d["passed"] = r.passed;
            return d;
        },
        py::arg("trials") = 1000, py::arg("max_n") = 8, py::arg("max_rank") = 8, py::arg("max_dim") = 32,
        py::arg("seed") = 0, py::arg("tolerance") = 1e-10);

    m.def(
        "rank_similarity",
        [](const F64Array& a, const F64Array& b, bool cosine) {
            return from_matrix(rank_similarity(to_matrix(a, "a"), to_matrix(b, "b"), cosine));
        },
        py::arg("a"), py::arg("b"), py::arg("cosine") = false);

    m.def(
        "bench_kernels_json",
        [](std::size_t t, std::size_t d, std::size_t r, std::size_t k, const std::string& dtype, std::size_t threads,
           std::size_t repeats, std::uint64_t seed) {
            const BenchConfig cfg{t, d, r, k, dtype, threads, repeats, seed};
            py::gil_scoped_release release;
            return to_json(bench_kernels(cfg)).dump();
        },
        py::arg("t") = 4096, py::arg("d") = 1024, py::arg("r") = 64, py::arg("k") = 8, py::arg("dtype") = "f32",
        py::arg("threads") = 4, py::arg("repeats") = 5, py::arg("seed") = 0);
}

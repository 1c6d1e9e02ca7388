// Copyright (c) 2026, The SMoRA Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense matrix type, softmax / top-k primitives, deterministic RNG and
// parameter initializers shared by every other module.

#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace smora {

using Vector = std::vector<double>;

/// Row-major dense matrix. `BasicMatrix<float>` exists only for the kernel
/// benchmark path; everything else runs on `Matrix` (f64).
template <typename T>
class BasicMatrix {
public:
    using value_type = T;

    BasicMatrix() = default;
    BasicMatrix(std::size_t rows, std::size_t cols, T fill = T{0});
    BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data);

    static BasicMatrix identity(std::size_t n);
    static BasicMatrix from_rows(std::initializer_list<std::initializer_list<T>> rows);

    [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
    [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
    [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    [[nodiscard]] std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    [[nodiscard]] std::span<const T> row(std::size_t r) const noexcept {
        return {data_.data() + r * cols_, cols_};
    }

    [[nodiscard]] std::span<T> values() noexcept { return data_; }
    [[nodiscard]] std::span<const T> values() const noexcept { return data_; }
    [[nodiscard]] T* data() noexcept { return data_.data(); }
    [[nodiscard]] const T* data() const noexcept { return data_.data(); }

    void fill(T v);

    bool operator==(const BasicMatrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

using Matrix = BasicMatrix<double>;
using MatrixF = BasicMatrix<float>;

extern template class BasicMatrix<double>;
extern template class BasicMatrix<float>;

/// Platform-independent seeded generator. The bit stream is mt19937_64,
/// whose output sequence is fixed by the standard; distributions are
/// derived here rather than through <random> distributions, which are
/// implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    [[nodiscard]] std::uint64_t seed() const noexcept { return seed_; }

    std::uint64_t next_u64();
    /// Uniform in [0, 1).
    double uniform();
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);
    double normal();
    /// Standard Gumbel(0, 1) sample.
    double gumbel();

    /// Independent stream for a named sub-component; does not advance `*this`.
    [[nodiscard]] Rng child(std::string_view name) const;
    [[nodiscard]] Rng child(std::uint64_t index) const;

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

std::uint64_t mix64(std::uint64_t x) noexcept;

/// Numerically stable softmax (max subtraction). Throws on empty or
/// non-finite input.
Vector softmax(std::span<const double> v);

/// Indices of the k largest entries, ties to the lowest index, returned in
/// ascending index order.
std::vector<std::size_t> top_k_indices(std::span<const double> v, std::size_t k);

/// N(0, 2 / cols) entries, fan-in = cols.
Matrix kaiming_init(std::size_t rows, std::size_t cols, Rng& rng);
/// N(0, std^2) entries.
Matrix normal_init(std::size_t rows, std::size_t cols, double stddev, Rng& rng);

Matrix dense_matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
/// a * x
Vector matvec(const Matrix& a, std::span<const double> x);
/// a^T * x
Vector matvec_t(const Matrix& a, std::span<const double> x);
/// m += alpha * u v^T
void add_outer(Matrix& m, double alpha, std::span<const double> u, std::span<const double> v);
/// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);
double dot(std::span<const double> a, std::span<const double> b);

Matrix add(const Matrix& a, const Matrix& b);
Matrix scaled(const Matrix& a, double s);

double max_abs_diff(std::span<const double> a, std::span<const double> b);
double max_abs_diff(const Matrix& a, const Matrix& b);
bool all_finite(std::span<const double> v);

/// Shortest decimal text that parses back to exactly `v`.
std::string format_double(double v);

}  // namespace smora

// Copyright 2026 The cpm4kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>
#include <vector>

#include "cpm4/error.hpp"
#include "cpm4/tensor.hpp"

namespace cpm4::quant {

/// Gram matrix of calibration inputs, d x d row-major in 64-bit.
struct HessianEstimate {
    std::size_t dim = 0;
    std::vector<double> h;
    std::string mode = "full";  // "full" or "prefix"
    std::size_t s = 0;          // first position kept in prefix mode
    std::size_t rows_used = 0;

    double operator()(std::size_t i, std::size_t j) const noexcept { return h[i * dim + j]; }
    double& operator()(std::size_t i, std::size_t j) noexcept { return h[i * dim + j]; }
};

namespace detail {

/// Accumulates x x^T over the rows for which keep(i) holds, in row order.
template <class Keep>
HessianEstimate gram(const Tensor& x, Keep keep) {
    HessianEstimate e;
    e.dim = x.cols();
    e.h.assign(e.dim * e.dim, 0.0);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        if (!keep(r)) continue;
        ++e.rows_used;
        const auto row = x.row(r);
        for (std::size_t a = 0; a < e.dim; ++a) {
            const double xa = row[a];
            for (std::size_t b = a; b < e.dim; ++b) e.h[a * e.dim + b] += xa * static_cast<double>(row[b]);
        }
    }
    for (std::size_t a = 0; a < e.dim; ++a)
        for (std::size_t b = 0; b < a; ++b) e.h[a * e.dim + b] = e.h[b * e.dim + a];
    return e;
}

} // namespace detail

/// H = X^T X over every row.
inline HessianEstimate hessian(const Tensor& x) {
    CPM4_REQUIRE(x.rank() == 2 && x.rows() > 0, PreconditionError, "Hessian needs at least one calibration row");
    return detail::gram(x, [](std::size_t) { return true; });
}

/// H over the rows whose position is at least s. s == 0 is the full Hessian.
inline HessianEstimate prefix_hessian(const Tensor& x, std::span<const std::size_t> positions, std::size_t s) {
    CPM4_REQUIRE(positions.size() == x.rows(), ValidationError, "one position per calibration row required");
    auto e = detail::gram(x, [&](std::size_t r) { return positions[r] >= s; });
    CPM4_REQUIRE(e.rows_used > 0, PreconditionError,
                 "every calibration row has position < " + std::to_string(s) + "; use a smaller s or longer sequences");
    e.mode = s == 0 ? "full" : "prefix";
    e.s = s;
    return e;
}

} // namespace cpm4::quant

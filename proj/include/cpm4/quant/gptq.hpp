// Copyright 2026 The cpm4kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <span>

#include "cpm4/error.hpp"
#include "cpm4/quant/hessian.hpp"
#include "cpm4/quant/quantized_linear.hpp"
#include "cpm4/tensor.hpp"

namespace cpm4::quant {

struct GptqOptions {
    std::size_t group_size = 128;
    int bits = 4;
    bool symmetric = false;
    double damp = 0.01;  // times mean(diag H)
};

/// Column-by-column GPTQ: each column is rounded to its group grid and the rounding error is
/// spread over the remaining columns through the upper Cholesky factor of H^-1. Group grids
/// are fitted to the updated weights when the group's first column is reached.
inline QuantizedLinear gptq_quantize(const Tensor& w, const HessianEstimate& hs, const GptqOptions& opt = {}) {
    CPM4_REQUIRE(w.rank() == 2 && w.cols() == hs.dim, ValidationError, "Hessian size differs from the weight's input width");
    CPM4_REQUIRE(opt.group_size > 0, ValidationError, "group size must be positive");
    CPM4_REQUIRE(opt.bits == 4 || opt.bits == 8, ValidationError, "only 4- and 8-bit codes are supported");
    const auto rows = static_cast<Eigen::Index>(w.rows()), cols = static_cast<Eigen::Index>(w.cols());
    Eigen::MatrixXd W(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) W(r, c) = w(std::size_t(r), std::size_t(c));
    Eigen::MatrixXd H(cols, cols);
    for (Eigen::Index i = 0; i < cols; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) H(i, j) = hs(std::size_t(i), std::size_t(j));

    // Inputs that never fire carry no information: fix their weights at zero.
    for (Eigen::Index i = 0; i < cols; ++i) {
        if (H(i, i) == 0.0) {
            H(i, i) = 1.0;
            W.col(i).setZero();
        }
    }
    H.diagonal().array() += opt.damp * H.diagonal().mean();

    Eigen::LLT<Eigen::MatrixXd> llt(H);
    CPM4_REQUIRE(llt.info() == Eigen::Success, NumericError, "Cholesky of the damped Hessian failed");
    const Eigen::MatrixXd hinv = llt.solve(Eigen::MatrixXd::Identity(cols, cols));
    Eigen::LLT<Eigen::MatrixXd> llt_inv(hinv);
    CPM4_REQUIRE(llt_inv.info() == Eigen::Success, NumericError, "Cholesky of the inverse Hessian failed");
    const Eigen::MatrixXd U = llt_inv.matrixU();

    QuantizedLinear q;
    q.out_features = w.rows();
    q.in_features = w.cols();
    q.group_size = opt.group_size;
    q.bits = opt.bits;
    q.symmetric = opt.symmetric;
    q.codes.resize(w.size());
    q.scales.resize(q.out_features * q.n_groups());
    q.zeros.resize(q.scales.size());

    std::vector<float> group(opt.group_size);
    for (Eigen::Index i = 0; i < cols; ++i) {
        const std::size_t gi = std::size_t(i) / opt.group_size;
        if (std::size_t(i) % opt.group_size == 0) {
            const std::size_t len = std::min(opt.group_size, q.in_features - std::size_t(i));
            for (Eigen::Index r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < len; ++c) group[c] = static_cast<float>(W(r, i + Eigen::Index(c)));
                const GroupGrid g = fit_grid(std::span<const float>(group.data(), len), opt.bits, opt.symmetric);
                q.scales[std::size_t(r) * q.n_groups() + gi] = g.scale;
                q.zeros[std::size_t(r) * q.n_groups() + gi] = g.zero;
            }
        }
        const double d = U(i, i);
        for (Eigen::Index r = 0; r < rows; ++r) {
            const GroupGrid g = q.grid(std::size_t(r), std::size_t(i));
            const std::uint8_t code = quantize_value(static_cast<float>(W(r, i)), g, opt.bits);
            q.codes[std::size_t(r) * q.in_features + std::size_t(i)] = code;
            const double err = (W(r, i) - dequantize_value(code, g)) / d;
            if (err != 0.0)
                for (Eigen::Index j = i + 1; j < cols; ++j) W(r, j) -= err * U(i, j);
        }
    }
    return q;
}

/// ||X W^T - X Wq^T||^2 over the rows with position >= min_pos (all rows if positions is empty).
inline double proxy_loss(const Tensor& x, std::span<const std::size_t> positions, std::size_t min_pos, const Tensor& w,
                         const Tensor& wq) {
    CPM4_REQUIRE(w.shape() == wq.shape() && x.cols() == w.cols(), ValidationError, "proxy loss shape mismatch");
    std::vector<double> diff(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) diff[i] = double(w[i]) - double(wq[i]);
    double loss = 0.0;
    for (std::size_t r = 0; r < x.rows(); ++r) {
        if (!positions.empty() && positions[r] < min_pos) continue;
        const auto row = x.row(r);
        for (std::size_t o = 0; o < w.rows(); ++o) {
            double acc = 0.0;
            for (std::size_t c = 0; c < w.cols(); ++c) acc += diff[o * w.cols() + c] * row[c];
            loss += acc * acc;
        }
    }
    return loss;
}

} // namespace cpm4::quant

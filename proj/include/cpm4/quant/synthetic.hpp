// Copyright 2026 The cpm4kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <random>

#include "cpm4/quant/calibration.hpp"

namespace cpm4::quant {

/// Calibration rows with massive activations at the first `s` positions of each sequence.
/// Later rows are correlated Gaussians x = A z; early rows add a `magnitude`-times larger
/// component on a few fixed channels, along a direction unrelated to A.
inline LayerActivations prefix_outlier_activations(std::size_t n_seq, std::size_t seq_len, std::size_t d, std::size_t s,
                                                   double magnitude, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n01(0.0, 1.0);
    std::vector<double> a(d * d);
    for (double& v : a) v = n01(rng) / std::sqrt(double(d));
    for (std::size_t i = 0; i < d; ++i) a[i * d + i] += 1.0;
    const std::size_t n_hot = std::max<std::size_t>(1, d / 16);
    std::vector<std::size_t> hot(n_hot);
    for (auto& h : hot) h = rng() % d;

    LayerActivations out;
    out.x = Tensor(n_seq * seq_len, d);
    std::vector<double> z(d);
    for (std::size_t q = 0; q < n_seq; ++q) {
        for (std::size_t p = 0; p < seq_len; ++p) {
            const std::size_t r = q * seq_len + p;
            for (double& v : z) v = n01(rng);
            for (std::size_t i = 0; i < d; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < d; ++j) acc += a[i * d + j] * z[j];
                out.x(r, i) = static_cast<float>(acc);
            }
            if (p < s)
                for (std::size_t h : hot) out.x(r, h) += static_cast<float>(magnitude * (1.0 + 0.1 * n01(rng)));
            out.positions.push_back(p);
        }
    }
    return out;
}

} // namespace cpm4::quant

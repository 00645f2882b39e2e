// Copyright 2026 The cpm4kit Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <limits>
#include <random>

#include "common/test_util.hpp"
#include "cpm4/attention.hpp"

using namespace cpm4;
using cpm4::testing::naive_attention;
using cpm4::testing::randn;

TEST(DenseAttention, SingleKeyReturnsItsValue) {
    AttentionShape s{1, 1, 4};
    Tensor q(1, 4), k(1, 4), v(1, 4);
    for (int c = 0; c < 4; ++c) {
        q(0, c) = 1.0f;
        k(0, c) = 1.0f;
        v(0, c) = 0.25f * c - 1.0f;
    }
    const Tensor out = dense_attention(q, k, v, s);
    EXPECT_EQ(out, v);
}

TEST(DenseAttention, EqualScoresAverageValues) {
    AttentionShape s{1, 1, 2};
    Tensor q(1, 2), k(2, 2), v(2, 2);
    q(0, 0) = 1.0f;
    k(0, 1) = 3.0f;  // both keys orthogonal to q
    k(1, 1) = -3.0f;
    v(0, 0) = 1.0f;
    v(0, 1) = 2.0f;
    v(1, 0) = 3.0f;
    v(1, 1) = 6.0f;
    const Tensor out = dense_attention(q, k, v, s, 1);
    EXPECT_FLOAT_EQ(out(0, 0), 2.0f);
    EXPECT_FLOAT_EQ(out(0, 1), 4.0f);
}

TEST(DenseAttention, MatchesTripleLoopOracle) {
    std::mt19937_64 rng(21);
    for (auto shape : {AttentionShape{2, 2, 8}, AttentionShape{2, 1, 8}, AttentionShape{8, 2, 4}}) {
        const Tensor q = randn(8, shape.q_width(), rng);
        const Tensor k = randn(8, shape.kv_width(), rng);
        const Tensor v = randn(8, shape.kv_width(), rng);
        const Tensor got = dense_attention(q, k, v, shape);
        const Tensor ref = naive_attention(q, k, v, shape, [](std::size_t i, std::size_t j) { return j <= i; });
        EXPECT_LT(max_abs_diff(got, ref), 1e-5f);
    }
}

TEST(DenseAttention, GroupSizeOneIsMultiHead) {
    std::mt19937_64 rng(22);
    AttentionShape s{4, 4, 8};
    const Tensor q = randn(6, s.q_width(), rng);
    const Tensor k = randn(10, s.kv_width(), rng);
    const Tensor v = randn(10, s.kv_width(), rng);
    const Tensor got = dense_attention(q, k, v, s, 4);
    const Tensor ref = naive_attention(q, k, v, s, [](std::size_t i, std::size_t j) { return j <= i + 4; });
    EXPECT_LT(max_abs_diff(got, ref), 1e-6f);
}

TEST(DenseAttention, NonFiniteInputIsNumericError) {
    AttentionShape s{1, 1, 2};
    Tensor q(1, 2), k(1, 2), v(1, 2);
    q(0, 0) = std::numeric_limits<float>::quiet_NaN();
    EXPECT_THROW(dense_attention(q, k, v, s), NumericError);
    q(0, 0) = 0.0f;
    v(0, 1) = std::numeric_limits<float>::infinity();
    EXPECT_THROW(dense_attention(q, k, v, s), NumericError);
}

TEST(SlidingWindow, LargeWindowEqualsDense) {
    std::mt19937_64 rng(23);
    AttentionShape s{4, 2, 8};
    const Tensor q = randn(12, s.q_width(), rng);
    const Tensor k = randn(12, s.kv_width(), rng);
    const Tensor v = randn(12, s.kv_width(), rng);
    EXPECT_LT(max_abs_diff(sliding_window_attention(q, k, v, s, 12), dense_attention(q, k, v, s)), 1e-6f);
    EXPECT_LT(max_abs_diff(sliding_window_attention(q, k, v, s, 100), dense_attention(q, k, v, s)), 1e-6f);
}

TEST(SlidingWindow, WindowOneAttendsSelf) {
    std::mt19937_64 rng(24);
    AttentionShape s{2, 2, 4};
    const Tensor q = randn(5, s.q_width(), rng);
    const Tensor k = randn(5, s.kv_width(), rng);
    const Tensor v = randn(5, s.kv_width(), rng);
    const Tensor out = sliding_window_attention(q, k, v, s, 1);
    EXPECT_EQ(out, v);
}

TEST(SlidingWindow, MatchesMaskedDenseOracle) {
    std::mt19937_64 rng(25);
    AttentionShape s{4, 2, 8};
    for (std::size_t w : {2u, 3u, 7u}) {
        const Tensor q = randn(10, s.q_width(), rng);
        const Tensor k = randn(16, s.kv_width(), rng);
        const Tensor v = randn(16, s.kv_width(), rng);
        const Tensor got = sliding_window_attention(q, k, v, s, w, 6);
        const Tensor ref =
            naive_attention(q, k, v, s, [&](std::size_t i, std::size_t j) { return j <= i + 6 && j + w > i + 6; });
        EXPECT_LT(max_abs_diff(got, ref), 1e-5f);
    }
}

TEST(SlidingWindow, TreeAncestorsAlwaysVisible) {
    std::mt19937_64 rng(26);
    AttentionShape s{2, 1, 8};
    const std::vector<int> parents{-1, 0, 0, 1, 3};
    const auto mask = PackedMask::from_parents(parents);
    const std::size_t prefix = 7, n = parents.size();
    const Tensor q = randn(n, s.q_width(), rng);
    const Tensor k = randn(prefix + n, s.kv_width(), rng);
    const Tensor v = randn(prefix + n, s.kv_width(), rng);
    for (std::size_t w : {1u, 3u, 50u}) {
        const Tensor got = sliding_window_attention(q, k, v, s, w, 0, &mask);
        const Tensor ref = naive_attention(q, k, v, s, [&](std::size_t i, std::size_t j) {
            const std::size_t depth = mask.row_indices(i).size();  // path length incl. self
            const std::size_t logical_len = prefix + depth;
            if (j >= prefix) return mask.test(i, j - prefix);
            return j + std::min(w, logical_len) >= logical_len;   // inside the window
        });
        EXPECT_LT(max_abs_diff(got, ref), 1e-5f) << "window " << w;
    }
}

// Copyright 2026 The cpm4kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cpm4/error.hpp"

namespace cpm4 {

/// n x n ancestor-or-self mask of a draft tree, packed row-wise into 64-bit words.
/// Bit j of row i lives in word j / 64 of that row, at bit position j % 64.
class PackedMask {
public:
    PackedMask() = default;
    explicit PackedMask(std::size_t n) : n_(n), words_per_row_((n + 63) / 64), words_(n * words_per_row_, 0) {}

    /// Builds the mask from parent links (-1 for roots). Parents must precede children.
    static PackedMask from_parents(std::span<const int> parents) {
        PackedMask m(parents.size());
        for (std::size_t i = 0; i < parents.size(); ++i) {
            const int p = parents[i];
            CPM4_REQUIRE(p < static_cast<int>(i), PreconditionError, "tree parents must precede children");
            if (p >= 0) {
                for (std::size_t w = 0; w < m.words_per_row_; ++w)
                    m.words_[i * m.words_per_row_ + w] = m.words_[static_cast<std::size_t>(p) * m.words_per_row_ + w];
            }
            m.set(i, i);
        }
        return m;
    }

    /// Packs a dense boolean matrix (row-major, n*n entries).
    static PackedMask pack(std::span<const std::uint8_t> dense, std::size_t n) {
        CPM4_REQUIRE(dense.size() == n * n, ValidationError, "dense mask size mismatch");
        PackedMask m(n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (dense[i * n + j]) m.set(i, j);
        return m;
    }

    std::vector<std::uint8_t> unpack() const {
        std::vector<std::uint8_t> dense(n_ * n_, 0);
        for (std::size_t i = 0; i < n_; ++i)
            for (std::size_t j = 0; j < n_; ++j) dense[i * n_ + j] = test(i, j) ? 1 : 0;
        return dense;
    }

    std::size_t size() const noexcept { return n_; }
    std::size_t words_per_row() const noexcept { return words_per_row_; }
    std::span<const std::uint64_t> row_words(std::size_t i) const { return {words_.data() + i * words_per_row_, words_per_row_}; }
    std::span<const std::uint64_t> words() const noexcept { return words_; }

    bool test(std::size_t i, std::size_t j) const noexcept {
        return (words_[i * words_per_row_ + j / 64] >> (j % 64)) & 1u;
    }
    void set(std::size_t i, std::size_t j) noexcept { words_[i * words_per_row_ + j / 64] |= std::uint64_t{1} << (j % 64); }

    /// Ancestors-or-self of row i in ascending order.
    std::vector<std::size_t> row_indices(std::size_t i) const {
        std::vector<std::size_t> out;
        for (std::size_t j = 0; j < n_; ++j)
            if (test(i, j)) out.push_back(j);
        return out;
    }

    friend bool operator==(const PackedMask&, const PackedMask&) = default;

private:
    std::size_t n_ = 0;
    std::size_t words_per_row_ = 0;
    std::vector<std::uint64_t> words_;
};

} // namespace cpm4

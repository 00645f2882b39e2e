// Copyright 2026 The cpm4kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

#include "cpm4/error.hpp"
#include "cpm4/tensor.hpp"

namespace cpm4 {

/// Semantic-kernel geometry shared by the cache and the sparse attention config.
struct KernelParams {
    std::size_t kernel_size = 32;
    std::size_t stride = 16;
    std::size_t coarse_stride = 128;

    // Coarse kernels keep the fine overlap ratio, so coarse_stride == stride reproduces the
    // fine kernels exactly.
    std::size_t coarse_kernel_size() const noexcept { return kernel_size * coarse_stride / stride; }

    void validate() const {
        CPM4_REQUIRE(kernel_size > 0, ValidationError, "kernel size must be positive");
        CPM4_REQUIRE(stride > 0, ValidationError, "kernel stride must be positive");
        CPM4_REQUIRE(stride <= kernel_size, ValidationError, "kernel stride must not exceed kernel size");
        CPM4_REQUIRE(coarse_stride >= stride && coarse_stride % stride == 0, ValidationError,
                     "coarse stride must be a multiple of the fine stride");
    }

    friend bool operator==(const KernelParams&, const KernelParams&) = default;
};

/// Mean of rows [begin, end) fetched through `row_at`, summed in index order in 64-bit.
/// Every kernel mean in the library goes through this function so that stored and
/// recomputed means agree bit for bit.
template <class RowAt>
void window_mean(RowAt&& row_at, std::size_t begin, std::size_t end, std::span<float> out) {
    std::vector<double> acc(out.size(), 0.0);
    for (std::size_t i = begin; i < end; ++i) {
        std::span<const float> r = row_at(i);
        for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += r[c];
    }
    const double n = static_cast<double>(end - begin);
    for (std::size_t c = 0; c < acc.size(); ++c) out[c] = static_cast<float>(acc[c] / n);
}

/// Mean-pooled kernels over `keys`: row j = Mean(keys[j*stride : min(j*stride + size, l))),
/// for j < floor(l / stride).
inline Tensor build_kernels(const Tensor& keys, std::size_t size, std::size_t stride) {
    CPM4_REQUIRE(size > 0 && stride > 0, PreconditionError, "kernel size and stride must be positive");
    const std::size_t l = keys.rows();
    const std::size_t n = l / stride;
    Tensor means(n, keys.cols());
    for (std::size_t j = 0; j < n; ++j)
        window_mean([&](std::size_t i) { return keys.row(i); }, j * stride, std::min(j * stride + size, l),
                    means.row(j));
    return means;
}

/// Key/value rows of one attention layer (post-rotary keys) together with fine and coarse
/// kernel means for every KV head. Blocks are implicit: block j spans [j*m, min((j+1)*m, l)).
class BlockizedKVCache {
public:
    BlockizedKVCache() = default;
    BlockizedKVCache(std::size_t n_kv_heads, std::size_t head_dim, KernelParams kp = {})
        : head_dim_(head_dim), kp_(kp), keys_(n_kv_heads), values_(n_kv_heads), fine_(n_kv_heads), coarse_(n_kv_heads) {
        kp_.validate();
        for (std::size_t h = 0; h < n_kv_heads; ++h) {
            keys_[h] = Tensor(0, head_dim);
            values_[h] = Tensor(0, head_dim);
            fine_[h] = Tensor(0, head_dim);
            coarse_[h] = Tensor(0, head_dim);
        }
    }

    std::size_t length() const noexcept { return length_; }
    std::size_t n_kv_heads() const noexcept { return keys_.size(); }
    std::size_t head_dim() const noexcept { return head_dim_; }
    const KernelParams& kernel_params() const noexcept { return kp_; }

    const Tensor& keys(std::size_t h) const { return keys_.at(h); }
    const Tensor& values(std::size_t h) const { return values_.at(h); }
    std::span<const float> key(std::size_t h, std::size_t i) const { return keys_[h].row(i); }
    std::span<const float> value(std::size_t h, std::size_t i) const { return values_[h].row(i); }

    /// Appends one token: `k_all` and `v_all` hold n_kv_heads * head_dim values each.
    void append(std::span<const float> k_all, std::span<const float> v_all) {
        CPM4_REQUIRE(k_all.size() == n_kv_heads() * head_dim_ && v_all.size() == k_all.size(), ValidationError,
                     "kv append width mismatch");
        for (std::size_t h = 0; h < n_kv_heads(); ++h) {
            keys_[h].push_row(k_all.subspan(h * head_dim_, head_dim_));
            values_[h].push_row(v_all.subspan(h * head_dim_, head_dim_));
        }
        ++length_;
    }

    void truncate(std::size_t len) {
        CPM4_REQUIRE(len <= length_, PreconditionError, "truncate beyond cache length");
        for (std::size_t h = 0; h < n_kv_heads(); ++h) {
            keys_[h].resize_rows(len);
            values_[h].resize_rows(len);
        }
        length_ = len;
        kernels_len_ = std::min(kernels_len_, len);
        for (std::size_t h = 0; h < n_kv_heads(); ++h) {
            fine_[h].resize_rows(std::min(fine_[h].rows(), kernel_count_valid(len, kp_.kernel_size, kp_.stride)));
            coarse_[h].resize_rows(
                std::min(coarse_[h].rows(), kernel_count_valid(len, kp_.coarse_kernel_size(), kp_.coarse_stride)));
        }
    }

    /// Keeps rows [0, prefix_len) plus the listed rows (ascending, each >= prefix_len), in order.
    /// Used after tree verification to retain only the accepted path.
    void keep(std::size_t prefix_len, std::span<const std::size_t> rows) {
        std::size_t dst = prefix_len;
        std::size_t prev = prefix_len;
        for (std::size_t idx = 0; idx < rows.size(); ++idx) {
            const std::size_t src = rows[idx];
            CPM4_REQUIRE(src < length_ && src >= prefix_len && (idx == 0 || src > prev), PreconditionError,
                         "keep: rows must be ascending and inside the appended region");
            prev = src;
            if (src != dst) {
                for (std::size_t h = 0; h < n_kv_heads(); ++h) {
                    std::copy_n(keys_[h].row(src).begin(), head_dim_, keys_[h].row(dst).begin());
                    std::copy_n(values_[h].row(src).begin(), head_dim_, values_[h].row(dst).begin());
                }
            }
            ++dst;
        }
        // Rows past the first moved index changed; invalidate kernels from there.
        kernels_len_ = std::min(kernels_len_, first_moved(prefix_len, rows));
        truncate(dst);
    }

    /// Brings the stored kernel means up to date with the current length.
    void sync_kernels() {
        if (kernels_synced()) return;
        for (std::size_t h = 0; h < n_kv_heads(); ++h) {
            refresh(h, fine_[h], kp_.kernel_size, kp_.stride);
            refresh(h, coarse_[h], kp_.coarse_kernel_size(), kp_.coarse_stride);
        }
        kernels_len_ = length_;
    }

    bool kernels_synced() const noexcept {
        return kernels_len_ == length_ && (keys_.empty() || (fine_[0].rows() == length_ / kp_.stride &&
                                                             coarse_[0].rows() == length_ / kp_.coarse_stride));
    }

    /// Fine kernel means at the current length (requires sync_kernels()).
    const Tensor& fine_means(std::size_t h) const {
        CPM4_REQUIRE(kernels_synced(), PreconditionError, "kernel means are stale; call sync_kernels()");
        return fine_.at(h);
    }
    const Tensor& coarse_means(std::size_t h) const {
        CPM4_REQUIRE(kernels_synced(), PreconditionError, "kernel means are stale; call sync_kernels()");
        return coarse_.at(h);
    }

private:
    // Number of kernels whose stored window [j*stride, min(j*stride+size, len)) is final,
    // i.e. not truncated by the sequence end.
    static std::size_t kernel_count_valid(std::size_t len, std::size_t size, std::size_t stride) {
        if (len < size) return 0;
        return std::min(len / stride, (len - size) / stride + 1);
    }

    static std::size_t first_moved(std::size_t prefix_len, std::span<const std::size_t> rows) {
        std::size_t dst = prefix_len;
        for (std::size_t r : rows) {
            if (r != dst) return dst;
            ++dst;
        }
        return dst;
    }

    void refresh(std::size_t h, Tensor& means, std::size_t size, std::size_t stride) {
        const std::size_t n = length_ / stride;
        // Kernels computed at kernels_len_ remain exact only if their window was complete then
        // and lies entirely below the first modified row.
        const std::size_t keep_rows = std::min(means.rows(), kernel_count_valid(kernels_len_, size, stride));
        means.resize_rows(std::min(keep_rows, n));
        const Tensor& k = keys_[h];
        std::vector<float> row(head_dim_);
        for (std::size_t j = means.rows(); j < n; ++j) {
            window_mean([&](std::size_t i) { return k.row(i); }, j * stride, std::min(j * stride + size, length_), row);
            means.push_row(row);
        }
    }

    std::size_t head_dim_ = 0;
    KernelParams kp_{};
    std::size_t length_ = 0;
    std::size_t kernels_len_ = 0;
    std::vector<Tensor> keys_, values_, fine_, coarse_;
};

} // namespace cpm4

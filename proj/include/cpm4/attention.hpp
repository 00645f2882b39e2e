// Copyright 2026 The cpm4kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "cpm4/error.hpp"
#include "cpm4/kv_cache.hpp"
#include "cpm4/tensor.hpp"
#include "cpm4/tree_mask.hpp"

namespace cpm4 {

struct AttentionShape {
    std::size_t n_q_heads = 1;
    std::size_t n_kv_heads = 1;
    std::size_t head_dim = 1;

    std::size_t group_size() const noexcept { return n_q_heads / n_kv_heads; }
    std::size_t q_width() const noexcept { return n_q_heads * head_dim; }
    std::size_t kv_width() const noexcept { return n_kv_heads * head_dim; }
    double scale() const noexcept { return 1.0 / std::sqrt(static_cast<double>(head_dim)); }

    void validate() const {
        CPM4_REQUIRE(n_q_heads > 0 && n_kv_heads > 0 && head_dim > 0, ValidationError,
                     "attention dimensions must be positive");
        CPM4_REQUIRE(n_q_heads % n_kv_heads == 0, ValidationError, "n_kv_heads must divide n_q_heads");
    }
};

/// Logical key sequence seen by one query row: physical rows [0, prefix_len) in order,
/// then the physical rows listed in `tail` (a draft-tree path, ancestors first).
struct ContextView {
    std::size_t prefix_len = 0;
    std::span<const std::size_t> tail{};

    std::size_t length() const noexcept { return prefix_len + tail.size(); }
    std::size_t physical(std::size_t logical) const noexcept {
        return logical < prefix_len ? logical : tail[logical - prefix_len];
    }
};

/// Half-open interval of logical key positions.
struct LogicalRange {
    std::size_t begin = 0;
    std::size_t end = 0;
};

/// Per-row context: the causal default is prefix_len = position + 1 with an empty tail.
struct RowContext {
    std::size_t prefix_len = 0;
    std::vector<std::size_t> tail;
    std::size_t position = 0;  // rotary position of the query row

    ContextView view() const noexcept { return {prefix_len, tail}; }
};

/// Key/value rows of a cache, addressed by (kv head, physical row).
struct CacheRows {
    const BlockizedKVCache& cache;
    std::span<const float> key(std::size_t h, std::size_t i) const { return cache.key(h, i); }
    std::span<const float> value(std::size_t h, std::size_t i) const { return cache.value(h, i); }
};

/// Key/value rows of plain matrices laid out [rows, n_kv_heads * head_dim].
struct MatrixRows {
    const Tensor& k;
    const Tensor& v;
    std::size_t head_dim;
    std::span<const float> key(std::size_t h, std::size_t i) const { return k.row(i).subspan(h * head_dim, head_dim); }
    std::span<const float> value(std::size_t h, std::size_t i) const { return v.row(i).subspan(h * head_dim, head_dim); }
};

/// Softmax attention of every query head in one KV group over the union of `ranges`
/// (ascending, disjoint) of the logical context. Returns the number of key rows touched.
///
/// `q_group` and `out` hold group_size * head_dim values. Dense, windowed, and block-sparse
/// attention all reduce to this routine, so a sparse selection covering every block is
/// bit-identical to dense attention.
template <class Rows>
std::size_t attend_group(const Rows& rows, std::size_t kv_head, std::span<const float> q_group, const ContextView& ctx,
                         std::span<const LogicalRange> ranges, std::size_t head_dim, double scale,
                         std::span<float> out) {
    const std::size_t group = q_group.size() / head_dim;
    std::size_t n = 0;
    for (const auto& r : ranges) n += r.end - r.begin;
    CPM4_REQUIRE(n > 0, PreconditionError, "attention over an empty key set");
    std::vector<double> scores(n);
    std::vector<double> acc(head_dim);
    for (std::size_t g = 0; g < group; ++g) {
        std::span<const float> q = q_group.subspan(g * head_dim, head_dim);
        double mx = -std::numeric_limits<double>::infinity();
        std::size_t t = 0;
        for (const auto& r : ranges)
            for (std::size_t l = r.begin; l < r.end; ++l, ++t) {
                scores[t] = dot(q, rows.key(kv_head, ctx.physical(l))) * scale;
                mx = std::max(mx, scores[t]);
            }
        double denom = 0.0;
        for (double& s : scores) {
            s = std::exp(s - mx);
            denom += s;
        }
        std::fill(acc.begin(), acc.end(), 0.0);
        t = 0;
        for (const auto& r : ranges)
            for (std::size_t l = r.begin; l < r.end; ++l, ++t) {
                std::span<const float> v = rows.value(kv_head, ctx.physical(l));
                const double w = scores[t] / denom;
                for (std::size_t c = 0; c < head_dim; ++c) acc[c] += w * v[c];
            }
        for (std::size_t c = 0; c < head_dim; ++c) out[g * head_dim + c] = static_cast<float>(acc[c]);
    }
    return n;
}

/// Visible logical range of a sliding-window query: the last `window` positions, with the
/// draft-region tail always visible. window == 0 means unbounded.
inline LogicalRange window_range(const ContextView& ctx, std::size_t window) {
    const std::size_t len = ctx.length();
    if (window == 0 || window >= len) return {0, len};
    return {std::min(len - window, ctx.prefix_len), len};
}

namespace detail {

inline void require_finite(const Tensor& t, const char* what) {
    CPM4_REQUIRE(t.all_finite(), NumericError, std::string("non-finite values in ") + what);
}

inline Tensor attention_rows(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionShape& shape,
                             std::span<const RowContext> contexts, std::size_t window) {
    shape.validate();
    CPM4_REQUIRE(q.cols() == shape.q_width(), ValidationError, "query width mismatch");
    CPM4_REQUIRE(k.cols() == shape.kv_width() && v.cols() == shape.kv_width(), ValidationError,
                 "key/value width mismatch");
    CPM4_REQUIRE(k.rows() == v.rows(), PreconditionError, "keys and values differ in length");
    require_finite(q, "queries");
    require_finite(k, "keys");
    require_finite(v, "values");
    MatrixRows rows{k, v, shape.head_dim};
    Tensor out(q.rows(), shape.q_width());
    const std::size_t gs = shape.group_size();
    const std::size_t gw = gs * shape.head_dim;
    for (std::size_t i = 0; i < q.rows(); ++i) {
        const ContextView ctx = contexts[i].view();
        CPM4_REQUIRE(ctx.length() <= k.rows() || !ctx.tail.empty(), PreconditionError, "query context exceeds keys");
        const LogicalRange r = window_range(ctx, window);
        for (std::size_t kvh = 0; kvh < shape.n_kv_heads; ++kvh)
            attend_group(rows, kvh, q.row(i).subspan(kvh * gw, gw), ctx, std::span(&r, 1), shape.head_dim,
                         shape.scale(), out.row(i).subspan(kvh * gw, gw));
    }
    return out;
}

inline std::vector<RowContext> causal_contexts(std::size_t n, std::size_t offset) {
    std::vector<RowContext> ctx(n);
    for (std::size_t i = 0; i < n; ++i) ctx[i] = {offset + i + 1, {}, offset + i};
    return ctx;
}

/// Contexts for a draft region of `mask.size()` rows placed after `prefix_len` committed rows.
inline std::vector<RowContext> tree_contexts(const PackedMask& mask, std::size_t prefix_len) {
    std::vector<RowContext> ctx(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) {
        ctx[i].prefix_len = prefix_len;
        for (std::size_t j : mask.row_indices(i)) ctx[i].tail.push_back(prefix_len + j);
        ctx[i].position = prefix_len + ctx[i].tail.size() - 1;
    }
    return ctx;
}

} // namespace detail

/// Causal grouped-query attention. Query row i sits at absolute position causal_offset + i and
/// attends keys [0, causal_offset + i]. Q is n x (n_q_heads*head_dim); K, V are m x (n_kv_heads*head_dim).
inline Tensor dense_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionShape& shape,
                              std::size_t causal_offset = 0) {
    CPM4_REQUIRE(causal_offset + q.rows() <= k.rows(), PreconditionError, "causal offset past the key sequence");
    const auto ctx = detail::causal_contexts(q.rows(), causal_offset);
    return detail::attention_rows(q, k, v, shape, ctx, 0);
}

/// Sliding-window attention for draft models. Without a mask the queries are causal rows at
/// causal_offset + i. With a tree mask the last mask.size() key rows form the draft region:
/// row i attends the committed prefix (windowed) plus its ancestors-or-self.
inline Tensor sliding_window_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionShape& shape,
                                       std::size_t window, std::size_t causal_offset = 0,
                                       const PackedMask* tree = nullptr) {
    CPM4_REQUIRE(window >= 1, PreconditionError, "window must be at least 1");
    if (tree == nullptr) {
        CPM4_REQUIRE(causal_offset + q.rows() <= k.rows(), PreconditionError, "causal offset past the key sequence");
        return detail::attention_rows(q, k, v, shape, detail::causal_contexts(q.rows(), causal_offset), window);
    }
    CPM4_REQUIRE(tree->size() == q.rows() && q.rows() <= k.rows(), PreconditionError, "tree mask does not match queries");
    const auto ctx = detail::tree_contexts(*tree, k.rows() - q.rows());
    return detail::attention_rows(q, k, v, shape, ctx, window);
}

} // namespace cpm4

// Copyright 2026 The cpm4kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Two-stage block-sparse attention.
//
// Stage 1 scores every semantic kernel (mean-pooled, overlapping key windows) against each
// query head, softmax-normalizes over kernels, averages the normalized scores across the
// heads of a KV group, and lifts kernel scores to blocks by taking the max over the kernels
// that intersect each block. Initial and local blocks are forced in, then the top-k of the
// remaining blocks are added. Stage 2 runs exact attention over the selected blocks only.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include <json.hpp>

#include "cpm4/attention.hpp"
#include "cpm4/error.hpp"
#include "cpm4/kv_cache.hpp"
#include "cpm4/tensor.hpp"

namespace cpm4::sparse {

struct SparseAttentionConfig {
    std::size_t block_size = 64;
    std::size_t kernel_size = 32;
    std::size_t kernel_stride = 16;
    std::size_t coarse_stride = 128;
    std::size_t top_k = 8;
    std::size_t n_init_blocks = 1;
    std::size_t n_local_blocks = 2;
    // When set, forced blocks consume the k budget instead of being added on top of it.
    bool forced_counts_against_k = false;
    // Normalize kernel scores with the coarse-kernel LSE estimate instead of an exact softmax.
    bool use_approx_lse = false;

    KernelParams kernel_params() const { return {kernel_size, kernel_stride, coarse_stride}; }

    /// Largest selection a query can receive.
    std::size_t max_selected() const noexcept {
        return forced_counts_against_k ? std::max(top_k, n_init_blocks + n_local_blocks)
                                       : top_k + n_init_blocks + n_local_blocks;
    }

    void validate() const {
        CPM4_REQUIRE(block_size > 0, ValidationError, "block size must be positive");
        CPM4_REQUIRE(top_k > 0, ValidationError, "top_k must be positive");
        kernel_params().validate();
        CPM4_REQUIRE(block_size % kernel_stride == 0, ValidationError, "block size must be a multiple of the kernel stride");
    }
};

struct BlockRange {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t size() const noexcept { return end - begin; }
    friend bool operator==(const BlockRange&, const BlockRange&) = default;
};

/// Blocks [j*m, min((j+1)*m, l)); the last block may be partial so every token is attendable.
inline std::vector<BlockRange> partition_blocks(std::size_t length, std::size_t block_size) {
    CPM4_REQUIRE(block_size > 0, PreconditionError, "block size must be positive");
    CPM4_REQUIRE(length >= 1, PreconditionError, "cannot partition an empty sequence");
    std::vector<BlockRange> blocks;
    for (std::size_t b = 0; b < length; b += block_size) blocks.push_back({b, std::min(b + block_size, length)});
    return blocks;
}

inline std::vector<BlockRange> partition_blocks(const Tensor& keys, const Tensor& values, std::size_t block_size) {
    CPM4_REQUIRE(keys.rows() == values.rows(), PreconditionError, "keys and values differ in length");
    return partition_blocks(keys.rows(), block_size);
}

inline std::vector<double> kernel_dots(std::span<const float> q, const Tensor& means, double scale) {
    CPM4_REQUIRE(means.rows() >= 1, PreconditionError, "no semantic kernels to score");
    CPM4_REQUIRE(means.cols() == q.size(), ValidationError, "query and kernel dimensions differ");
    std::vector<double> s(means.rows());
    for (std::size_t j = 0; j < means.rows(); ++j) s[j] = dot(q, means.row(j)) * scale;
    return s;
}

/// Softmax over kernels of the scaled dot products q . mean_j / sqrt(head_dim).
inline std::vector<double> kernel_scores(std::span<const float> q, const Tensor& means, double scale) {
    std::vector<double> s = kernel_dots(q, means, scale);
    const double lse = logsumexp(std::span<const double>(s));
    for (double& v : s) v = std::exp(v - lse);
    return s;
}

/// Single-pass kernel scores normalized by a precomputed (possibly approximate) LSE.
inline std::vector<double> kernel_scores_with_lse(std::span<const float> q, const Tensor& means, double scale, double lse) {
    std::vector<double> s = kernel_dots(q, means, scale);
    for (double& v : s) v = std::exp(v - lse);
    return s;
}

/// Elementwise mean of the post-softmax kernel scores of every head in a group.
inline std::vector<double> group_scores(const std::vector<std::vector<double>>& per_head) {
    CPM4_REQUIRE(!per_head.empty(), PreconditionError, "group has no heads");
    const std::size_t n = per_head.front().size();
    std::vector<double> out(n, 0.0);
    for (const auto& h : per_head) {
        CPM4_REQUIRE(h.size() == n, ValidationError, "ragged per-head kernel scores");
        for (std::size_t j = 0; j < n; ++j) out[j] += h[j];
    }
    for (double& v : out) v /= static_cast<double>(per_head.size());
    return out;
}

/// Block relevance for one (query, KV group). Forced blocks are flagged rather than
/// stored as +inf, so the numeric score stays inspectable.
struct RelevanceScores {
    std::vector<double> score;
    std::vector<std::uint8_t> forced;

    std::size_t n_blocks() const noexcept { return score.size(); }
    bool is_forced(std::size_t j) const noexcept { return forced[j] != 0; }
};

/// Kernel index range [first, last) of kernels whose window intersects [begin, end).
inline std::pair<std::size_t, std::size_t> intersecting_kernels(std::size_t begin, std::size_t end, std::size_t n_kernels,
                                                                std::size_t kernel_size, std::size_t stride) {
    // kernel j covers [j*stride, j*stride + kernel_size): intersects iff j*stride < end and
    // j*stride + kernel_size > begin.
    const std::size_t first = begin + 1 > kernel_size ? (begin + 1 - kernel_size + stride - 1) / stride : 0;
    const std::size_t last = std::min(n_kernels, (end + stride - 1) / stride);
    return {std::min(first, last), last};
}

/// Block score = max over intersecting kernels. Blocks no kernel reaches score 0.
inline RelevanceScores block_scores(std::span<const double> kernel_scores, std::size_t length, std::size_t block_size,
                                    std::size_t kernel_size, std::size_t stride) {
    CPM4_REQUIRE(kernel_scores.size() <= length / stride, ValidationError, "more kernel scores than kernels");
    const auto blocks = partition_blocks(length, block_size);
    RelevanceScores r;
    r.score.assign(blocks.size(), 0.0);
    r.forced.assign(blocks.size(), 0);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        const auto [first, last] =
            intersecting_kernels(blocks[b].begin, blocks[b].end, kernel_scores.size(), kernel_size, stride);
        for (std::size_t j = first; j < last; ++j) r.score[b] = std::max(r.score[b], kernel_scores[j]);
    }
    return r;
}

/// Marks the first n_init blocks and the n_local blocks ending at the query's own block.
inline void force_blocks(RelevanceScores& scores, std::size_t query_block, std::size_t n_init, std::size_t n_local) {
    const std::size_t n = scores.n_blocks();
    CPM4_REQUIRE(query_block < n, PreconditionError, "query block outside the scored range");
    for (std::size_t j = 0; j < std::min(n_init, n); ++j) scores.forced[j] = 1;
    for (std::size_t t = 0; t < n_local && t <= query_block; ++t) scores.forced[query_block - t] = 1;
}

inline std::vector<std::size_t> forced_blocks(const RelevanceScores& scores) {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < scores.n_blocks(); ++j)
        if (scores.is_forced(j)) out.push_back(j);
    return out;
}

/// Forced blocks plus the k best non-forced blocks (ties toward the lower index), ascending.
inline std::vector<std::size_t> select_topk(const RelevanceScores& scores, std::size_t k,
                                            bool forced_counts_against_k = false) {
    std::vector<std::size_t> selected = forced_blocks(scores);
    std::vector<std::size_t> rest;
    for (std::size_t j = 0; j < scores.n_blocks(); ++j)
        if (!scores.is_forced(j)) rest.push_back(j);
    std::size_t budget = k;
    if (forced_counts_against_k) budget = k > selected.size() ? k - selected.size() : 0;
    budget = std::min(budget, rest.size());
    std::partial_sort(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(budget), rest.end(),
                      [&](std::size_t a, std::size_t b) {
                          return scores.score[a] != scores.score[b] ? scores.score[a] > scores.score[b] : a < b;
                      });
    selected.insert(selected.end(), rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(budget));
    std::sort(selected.begin(), selected.end());
    return selected;
}

/// log-sum-exp of the scaled dot products against every fine kernel.
inline double exact_lse(std::span<const float> q, const Tensor& fine_means, double scale) {
    const auto s = kernel_dots(q, fine_means, scale);
    return logsumexp(std::span<const double>(s));
}

/// Coarse-kernel LSE estimate. Each coarse kernel stands for coarse_stride / stride fine
/// kernels, hence the additive ln(coarse_stride / stride); the estimate is exact when all
/// scores are equal and when coarse_stride == stride.
inline double approx_lse(std::span<const float> q, const Tensor& coarse_means, double scale, std::size_t stride,
                         std::size_t coarse_stride) {
    CPM4_REQUIRE(coarse_means.rows() >= 1, PreconditionError, "no coarse kernels");
    const auto s = kernel_dots(q, coarse_means, scale);
    const double lse = logsumexp(std::span<const double>(s));
    if (coarse_stride == stride) return lse;
    return lse + std::log(static_cast<double>(coarse_stride) / static_cast<double>(stride));
}

/// Exact attention of one query token (all heads of a KV group) over the tokens of the
/// selected blocks, causally clipped at the query's logical position.
template <class Rows>
std::size_t sparse_attend(const Rows& rows, std::size_t kv_head, std::span<const float> q_group, const ContextView& ctx,
                          std::span<const std::size_t> selection, std::size_t block_size, std::size_t head_dim,
                          double scale, std::span<float> out) {
    CPM4_REQUIRE(!selection.empty(), PreconditionError, "empty block selection");
    const std::size_t len = ctx.length();
    std::vector<LogicalRange> ranges;
    ranges.reserve(selection.size());
    for (std::size_t b : selection) {
        CPM4_REQUIRE(b * block_size < len, PreconditionError, "selected block beyond the query position");
        ranges.push_back({b * block_size, std::min((b + 1) * block_size, len)});
    }
    return attend_group(rows, kv_head, q_group, ctx, ranges, head_dim, scale, out);
}

struct SelectionTrace {
    std::size_t query_pos = 0;
    std::size_t group = 0;
    std::vector<std::size_t> forced;
    std::vector<std::size_t> selected;
    std::vector<double> scores_topk;  // scores of the selected non-forced blocks, in `selected` order
};

/// One JSON-lines record per trace.
inline nlohmann::json to_json(const SelectionTrace& t) {
    return {{"query_pos", t.query_pos}, {"group", t.group},           {"forced", t.forced},
            {"selected", t.selected},   {"scores_topk", t.scores_topk}};
}

/// Key-row touch counters, summed over (query token, KV group) pairs.
struct SparseStats {
    std::size_t query_groups = 0;
    std::size_t stage1_touches = 0;  // kernel means scored (plus coarse kernels when approximating)
    std::size_t stage2_touches = 0;  // key rows attended
    std::size_t dense_touches = 0;   // key rows dense attention would attend

    std::size_t total() const noexcept { return stage1_touches + stage2_touches; }
    SparseStats& operator+=(const SparseStats& o) {
        query_groups += o.query_groups;
        stage1_touches += o.stage1_touches;
        stage2_touches += o.stage2_touches;
        dense_touches += o.dense_touches;
        return *this;
    }
};

namespace detail {

// Kernel means over the logical context of one query. Stored means are reused when their
// window is identical in logical and physical space; everything else is recomputed with the
// same window_mean routine.
inline Tensor context_means(const BlockizedKVCache& cache, std::size_t kv_head, const ContextView& ctx,
                            std::size_t kernel_size, std::size_t stride, bool coarse) {
    const std::size_t len = ctx.length();
    const std::size_t n = len / stride;
    Tensor means(n, cache.head_dim());
    const bool whole_cache = ctx.tail.empty() && len == cache.length();
    const Tensor& stored = coarse ? cache.coarse_means(kv_head) : cache.fine_means(kv_head);
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t begin = j * stride;
        if (whole_cache || begin + kernel_size <= ctx.prefix_len) {
            std::copy_n(stored.row(j).begin(), cache.head_dim(), means.row(j).begin());
        } else {
            window_mean([&](std::size_t l) { return cache.key(kv_head, ctx.physical(l)); }, begin,
                        std::min(begin + kernel_size, len), means.row(j));
        }
    }
    return means;
}

} // namespace detail

/// Runs the full two-stage pipeline for one query token and one KV group.
/// Returns the selection; `stats` and `trace` are filled when non-null.
inline std::vector<std::size_t> infllm_attend_group(const BlockizedKVCache& cache, std::size_t kv_head,
                                                    std::span<const float> q_group, const ContextView& ctx,
                                                    const AttentionShape& shape, const SparseAttentionConfig& cfg,
                                                    std::span<float> out, SparseStats* stats = nullptr,
                                                    SelectionTrace* trace = nullptr) {
    const std::size_t len = ctx.length();
    CPM4_REQUIRE(len >= 1, PreconditionError, "query has an empty context");
    const std::size_t hd = shape.head_dim;
    const double scale = shape.scale();
    const std::size_t group = q_group.size() / hd;

    std::size_t stage1 = 0;
    std::vector<double> kscores;
    if (len / cfg.kernel_stride > 0) {
        const Tensor fine = detail::context_means(cache, kv_head, ctx, cfg.kernel_size, cfg.kernel_stride, false);
        stage1 += fine.rows();
        Tensor coarse;
        const bool approx = cfg.use_approx_lse && len / cfg.coarse_stride > 0;
        if (approx) {
            coarse = detail::context_means(cache, kv_head, ctx, cache.kernel_params().coarse_kernel_size(),
                                           cfg.coarse_stride, true);
            stage1 += coarse.rows();
        }
        std::vector<std::vector<double>> per_head;
        per_head.reserve(group);
        for (std::size_t g = 0; g < group; ++g) {
            std::span<const float> q = q_group.subspan(g * hd, hd);
            if (approx) {
                const double lse = approx_lse(q, coarse, scale, cfg.kernel_stride, cfg.coarse_stride);
                per_head.push_back(kernel_scores_with_lse(q, fine, scale, lse));
            } else {
                per_head.push_back(kernel_scores(q, fine, scale));
            }
        }
        kscores = group_scores(per_head);
    }
    RelevanceScores rel = block_scores(kscores, len, cfg.block_size, cfg.kernel_size, cfg.kernel_stride);
    force_blocks(rel, (len - 1) / cfg.block_size, cfg.n_init_blocks, cfg.n_local_blocks);
    std::vector<std::size_t> sel = select_topk(rel, cfg.top_k, cfg.forced_counts_against_k);

    const std::size_t stage2 = sparse_attend(CacheRows{cache}, kv_head, q_group, ctx, sel, cfg.block_size, hd, scale, out);
    if (stats) {
        stats->query_groups += 1;
        stats->stage1_touches += stage1;
        stats->stage2_touches += stage2;
        stats->dense_touches += len;
    }
    if (trace) {
        trace->group = kv_head;
        trace->query_pos = len - 1;
        trace->forced = forced_blocks(rel);
        trace->selected = sel;
        trace->scores_topk.clear();
        for (std::size_t b : sel)
            if (!rel.is_forced(b)) trace->scores_topk.push_back(rel.score[b]);
    }
    return sel;
}

struct SparseResult {
    Tensor out;
    SparseStats stats;
    std::vector<SelectionTrace> traces;  // one per (query row, KV group), row-major
};

/// Block-sparse attention for a batch of query rows over `cache`, each row with its own
/// logical context. The cache's kernel means must be synced.
inline SparseResult infllm_attention(const Tensor& q, const BlockizedKVCache& cache, std::span<const RowContext> contexts,
                                     const AttentionShape& shape, const SparseAttentionConfig& cfg,
                                     bool collect_traces = false) {
    cfg.validate();
    shape.validate();
    CPM4_REQUIRE(cache.kernel_params() == cfg.kernel_params(), PreconditionError,
                 "cache kernel geometry differs from the sparse attention config");
    CPM4_REQUIRE(cache.n_kv_heads() == shape.n_kv_heads && cache.head_dim() == shape.head_dim, ValidationError,
                 "cache shape differs from attention shape");
    CPM4_REQUIRE(q.cols() == shape.q_width() && contexts.size() == q.rows(), ValidationError, "query shape mismatch");
    SparseResult res;
    res.out = Tensor(q.rows(), shape.q_width());
    const std::size_t gw = shape.group_size() * shape.head_dim;
    if (collect_traces) res.traces.resize(q.rows() * shape.n_kv_heads);
    for (std::size_t i = 0; i < q.rows(); ++i) {
        const ContextView ctx = contexts[i].view();
        for (std::size_t h = 0; h < shape.n_kv_heads; ++h) {
            SelectionTrace* tr = collect_traces ? &res.traces[i * shape.n_kv_heads + h] : nullptr;
            infllm_attend_group(cache, h, q.row(i).subspan(h * gw, gw), ctx, shape, cfg, res.out.row(i).subspan(h * gw, gw),
                                &res.stats, tr);
        }
    }
    return res;
}

/// Causal convenience form: query row i sits at position causal_offset + i of the cache.
inline SparseResult infllm_attention(const Tensor& q, const BlockizedKVCache& cache, const AttentionShape& shape,
                                     const SparseAttentionConfig& cfg, std::size_t causal_offset,
                                     bool collect_traces = false) {
    CPM4_REQUIRE(causal_offset + q.rows() <= cache.length(), PreconditionError, "queries extend past the cache");
    return infllm_attention(q, cache, cpm4::detail::causal_contexts(q.rows(), causal_offset), shape, cfg, collect_traces);
}

} // namespace cpm4::sparse

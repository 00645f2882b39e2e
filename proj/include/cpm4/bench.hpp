// Copyright 2026 The cpm4kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cpm4/attention.hpp"
#include "cpm4/sparse_attention.hpp"

namespace cpm4::bench {

/// One mechanism at one context length, for a single decoding query at the last position.
/// Counts are per (query token, KV group).
struct AttnRow {
    std::size_t length = 0;
    std::string mechanism;
    std::size_t stage1_touches = 0;
    std::size_t stage2_touches = 0;
    std::size_t key_row_touches = 0;
    std::size_t dense_touches = 0;
    double touch_ratio = 1.0;   // (stage 1 + stage 2) / dense
    double stage2_ratio = 1.0;  // attended rows / dense
    std::size_t macs = 0;  // per query head: q.k against kernels or keys, plus p.v over attended rows
    double max_abs_diff = 0.0;
    double mean_selected = 0.0;
    double seconds = 0.0;  // wall time, reported separately
};

struct AttnBench {
    std::vector<AttnRow> rows;
    std::vector<sparse::SelectionTrace> traces;

    std::string csv() const {
        std::ostringstream os;
        os.precision(9);
        os << "length,mechanism,stage1_touches,stage2_touches,key_row_touches,dense_touches,touch_ratio,"
              "stage2_ratio,macs,"
              "max_abs_diff,mean_selected\n";
        for (const auto& r : rows)
            os << r.length << ',' << r.mechanism << ',' << r.stage1_touches << ',' << r.stage2_touches << ','
               << r.key_row_touches << ',' << r.dense_touches << ',' << r.touch_ratio << ','
               << r.stage2_ratio << ',' << r.macs << ','
               << r.max_abs_diff << ',' << r.mean_selected << '\n';
        return os.str();
    }

    std::string timings_csv() const {
        std::ostringstream os;
        os << "length,mechanism,seconds\n";
        for (const auto& r : rows) os << r.length << ',' << r.mechanism << ',' << r.seconds << '\n';
        return os.str();
    }
};

inline AttnBench bench_attention(const AttentionShape& shape, const sparse::SparseAttentionConfig& cfg,
                                 const std::vector<std::size_t>& lengths, std::uint64_t seed) {
    cfg.validate();
    AttnBench out;
    using clock = std::chrono::steady_clock;
    for (std::size_t l : lengths) {
        CPM4_REQUIRE(l >= 1, PreconditionError, "benchmark lengths must be positive");
        std::mt19937_64 rng(seed ^ (l * 0x9E3779B97F4A7C15ull));
        const Tensor k = random_normal(l, shape.kv_width(), rng, 1.0f);
        const Tensor v = random_normal(l, shape.kv_width(), rng, 1.0f);
        const Tensor q = random_normal(1, shape.q_width(), rng, 1.0f);
        BlockizedKVCache cache(shape.n_kv_heads, shape.head_dim, cfg.kernel_params());
        for (std::size_t i = 0; i < l; ++i) cache.append(k.row(i), v.row(i));
        cache.sync_kernels();

        auto t0 = clock::now();
        const Tensor dense = dense_attention(q, k, v, shape, l - 1);
        const double dense_s = std::chrono::duration<double>(clock::now() - t0).count();
        t0 = clock::now();
        const auto sp = sparse::infllm_attention(q, cache, shape, cfg, l - 1, true);
        const double sparse_s = std::chrono::duration<double>(clock::now() - t0).count();

        const std::size_t groups = sp.stats.query_groups;
        const std::size_t hd = shape.head_dim, heads = shape.group_size();
        AttnRow d;
        d.length = l;
        d.mechanism = "dense";
        d.stage2_touches = d.key_row_touches = d.dense_touches = l;
        d.macs = 2 * l * hd * heads;
        d.mean_selected = double((l + cfg.block_size - 1) / cfg.block_size);
        d.seconds = dense_s;
        out.rows.push_back(d);

        AttnRow s;
        s.length = l;
        s.mechanism = "sparse";
        s.stage1_touches = sp.stats.stage1_touches / groups;
        s.stage2_touches = sp.stats.stage2_touches / groups;
        s.key_row_touches = s.stage1_touches + s.stage2_touches;
        s.dense_touches = sp.stats.dense_touches / groups;
        s.touch_ratio = double(s.key_row_touches) / double(s.dense_touches);
        s.stage2_ratio = double(s.stage2_touches) / double(s.dense_touches);
        s.macs = (s.stage1_touches + 2 * s.stage2_touches) * hd * heads;
        s.max_abs_diff = max_abs_diff(sp.out, dense);
        std::size_t sel = 0;
        for (const auto& t : sp.traces) sel += t.selected.size();
        s.mean_selected = double(sel) / double(sp.traces.size());
        s.seconds = sparse_s;
        out.rows.push_back(s);
        out.traces.insert(out.traces.end(), sp.traces.begin(), sp.traces.end());
    }
    return out;
}

} // namespace cpm4::bench

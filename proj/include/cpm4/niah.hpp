// Copyright 2026 The cpm4kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cpm4/sparse_attention.hpp"

namespace cpm4::niah {

struct NiahConfig {
    sparse::SparseAttentionConfig sparse;
    AttentionShape shape{4, 2, 16};
    std::vector<std::size_t> lengths{1024, 4096, 16384};
    std::vector<int> depths{0, 50, 100};  // percent of the way through the context
    float needle_gain = 6.0f;
    float noise = 0.1f;
    float tolerance = 0.05f;  // max abs error allowed on the recovered signature
    std::uint64_t seed = 0;
};

struct NiahCell {
    std::size_t length = 0;
    int depth = 0;
    bool needle = true;
    std::size_t needle_block = 0;
    bool selected = false;       // every KV group selected the needle block
    double signature_err = 0.0;  // max abs distance from the needle's value signature
    bool pass = false;
};

inline std::size_t needle_block(std::size_t length, std::size_t block_size, int depth) {
    const std::size_t n_blocks = (length + block_size - 1) / block_size;
    return static_cast<std::size_t>(std::lround(double(depth) / 100.0 * double(n_blocks - 1)));
}

inline float signature(std::size_t c) { return 1.0f + 0.1f * static_cast<float>(c % 8); }

/// One haystack of random keys and values, optionally with a block whose keys point along
/// the query direction and whose values carry a fixed signature. The single query sits at
/// the last position.
inline NiahCell run_cell(const NiahConfig& cfg, std::size_t length, int depth, bool with_needle) {
    CPM4_REQUIRE(depth >= 0 && depth <= 100, PreconditionError, "needle depth must lie in [0, 100]");
    const AttentionShape& s = cfg.shape;
    const std::size_t hd = s.head_dim, m = cfg.sparse.block_size;
    std::mt19937_64 rng(cfg.seed ^ (length * 1000003u + std::size_t(depth) * 31u + (with_needle ? 1u : 0u)));
    std::normal_distribution<float> n(0.0f, 1.0f);
    std::vector<float> dir(hd);
    for (std::size_t c = 0; c < hd; ++c) dir[c] = (c % 3 == 0) ? 1.0f : -0.5f;

    NiahCell cell;
    cell.length = length;
    cell.depth = depth;
    cell.needle = with_needle;
    cell.needle_block = needle_block(length, m, depth);
    const std::size_t nb_begin = cell.needle_block * m, nb_end = std::min(nb_begin + m, length);

    BlockizedKVCache cache(s.n_kv_heads, hd, cfg.sparse.kernel_params());
    std::vector<float> k(s.kv_width()), v(s.kv_width());
    for (std::size_t i = 0; i < length; ++i) {
        const bool in_needle = with_needle && i >= nb_begin && i < nb_end;
        for (std::size_t h = 0; h < s.n_kv_heads; ++h)
            for (std::size_t c = 0; c < hd; ++c) {
                k[h * hd + c] = in_needle ? cfg.needle_gain * dir[c] : cfg.noise * n(rng);
                v[h * hd + c] = in_needle ? signature(c) : n(rng);
            }
        cache.append(k, v);
    }
    cache.sync_kernels();

    Tensor q(1, s.q_width());
    for (std::size_t h = 0; h < s.n_q_heads; ++h)
        for (std::size_t c = 0; c < hd; ++c) q(0, h * hd + c) = dir[c];
    const auto res = sparse::infllm_attention(q, cache, s, cfg.sparse, length - 1, true);

    cell.selected = std::all_of(res.traces.begin(), res.traces.end(), [&](const sparse::SelectionTrace& t) {
        return std::binary_search(t.selected.begin(), t.selected.end(), cell.needle_block);
    });
    for (std::size_t j = 0; j < s.q_width(); ++j)
        cell.signature_err = std::max(cell.signature_err, double(std::fabs(res.out(0, j) - signature(j % hd))));
    // Without a needle the signature can only match by accident, which would be a false pass.
    cell.pass = (cell.selected || !with_needle) && cell.signature_err < cfg.tolerance;
    return cell;
}

struct NiahReport {
    std::vector<NiahCell> cells;     // needle runs, depth-major
    std::vector<NiahCell> controls;  // one per length, no needle

    bool all_pass() const {
        return std::all_of(cells.begin(), cells.end(), [](const NiahCell& c) { return c.pass; });
    }
    std::size_t false_passes() const {
        return static_cast<std::size_t>(
            std::count_if(controls.begin(), controls.end(), [](const NiahCell& c) { return c.pass; }));
    }

    /// Depth x length grid; the control row shows n/a unless a control falsely passes.
    std::string grid() const {
        std::vector<std::size_t> lengths;
        for (const auto& c : cells)
            if (std::find(lengths.begin(), lengths.end(), c.length) == lengths.end()) lengths.push_back(c.length);
        std::ostringstream os;
        os << "depth";
        for (auto l : lengths) os << '\t' << l;
        os << '\n';
        int depth = -1;
        for (const auto& c : cells) {
            if (c.depth != depth) {
                if (depth >= 0) os << '\n';
                depth = c.depth;
                os << depth << '%';
            }
            os << '\t' << (c.pass ? "pass" : "FAIL");
        }
        os << "\ncontrol";
        for (const auto& c : controls) os << '\t' << (c.pass ? "FALSE-PASS" : "n/a");
        os << '\n';
        return os.str();
    }

    std::string csv() const {
        std::ostringstream os;
        os.precision(9);
        os << "length,depth,needle,needle_block,selected,signature_err,pass\n";
        for (const auto* v : {&cells, &controls})
            for (const auto& c : *v)
                os << c.length << ',' << c.depth << ',' << int(c.needle) << ',' << c.needle_block << ',' << int(c.selected)
                   << ',' << c.signature_err << ',' << int(c.pass) << '\n';
        return os.str();
    }
};

inline NiahReport run_grid(const NiahConfig& cfg) {
    cfg.sparse.validate();
    NiahReport r;
    for (int d : cfg.depths)
        for (std::size_t l : cfg.lengths) r.cells.push_back(run_cell(cfg, l, d, true));
    for (std::size_t l : cfg.lengths) r.controls.push_back(run_cell(cfg, l, 50, false));
    return r;
}

} // namespace cpm4::niah

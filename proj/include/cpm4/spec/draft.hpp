// Copyright 2026 The cpm4kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <queue>
#include <random>
#include <span>
#include <vector>

#include "cpm4/error.hpp"
#include "cpm4/tensor.hpp"
#include "cpm4/tree_mask.hpp"

namespace cpm4::spec {

/// How node tokens were chosen from their parent's draft distribution. Sampled chains draw
/// each token from q; deterministic drafts (greedy chains, trees) pick top tokens.
enum class Proposal { Sampled, Deterministic };

/// Drafted tokens as a forest under the last committed token. parents[i] == -1 marks a
/// child of that token; a chain is the path graph.
struct DraftBatch {
    std::vector<int> tokens;
    std::vector<int> parents;
    std::vector<double> q;              // draft probability of tokens[i] given its context
    std::vector<std::size_t> depth;     // 0 for children of the committed token
    std::vector<std::vector<double>> dists;  // full-vocabulary draft distribution node i was drawn from
    Proposal proposal = Proposal::Deterministic;

    std::size_t size() const noexcept { return tokens.size(); }
    bool empty() const noexcept { return tokens.empty(); }

    std::vector<int> children(int node) const {
        std::vector<int> out;
        for (std::size_t i = 0; i < parents.size(); ++i)
            if (parents[i] == node) out.push_back(static_cast<int>(i));
        return out;
    }

    bool is_chain() const {
        for (std::size_t i = 0; i < parents.size(); ++i)
            if (parents[i] != static_cast<int>(i) - 1) return false;
        return true;
    }

    void validate(std::size_t vocab_size) const {
        const std::size_t n = tokens.size();
        CPM4_REQUIRE(parents.size() == n && q.size() == n && depth.size() == n && dists.size() == n, ValidationError,
                     "draft batch fields differ in length");
        for (std::size_t i = 0; i < n; ++i) {
            CPM4_REQUIRE(parents[i] >= -1 && parents[i] < static_cast<int>(i), ValidationError,
                         "draft parents must precede children");
            CPM4_REQUIRE(depth[i] == (parents[i] < 0 ? 0 : depth[std::size_t(parents[i])] + 1), ValidationError,
                         "draft depth inconsistent with parents");
            CPM4_REQUIRE(tokens[i] >= 0 && static_cast<std::size_t>(tokens[i]) < vocab_size, ValidationError,
                         "draft token outside the vocabulary");
            CPM4_REQUIRE(q[i] >= 0.0 && q[i] <= 1.0, ValidationError, "draft probability outside [0, 1]");
        }
    }

    /// Ancestor-or-self mask of the nodes.
    PackedMask mask() const { return PackedMask::from_parents(parents); }

    /// Mask for verification: row 0 is the committed token, node i sits at row i + 1.
    PackedMask verify_mask() const {
        std::vector<int> p(tokens.size() + 1, -1);
        for (std::size_t i = 0; i < tokens.size(); ++i) p[i + 1] = parents[i] + 1;
        return PackedMask::from_parents(p);
    }
};

/// Incremental draft model. Within a round, add_node returns ids 0, 1, 2, ... in call order
/// and any node may later be expanded with distribution(). Node -1 is the last committed token.
class Drafter {
public:
    virtual ~Drafter() = default;

    /// Starts a sequence. `target_hidden` holds the target's hidden rows for every prompt
    /// token but the last.
    virtual void begin(std::span<const int> prompt, const Tensor& target_hidden) {
        (void)prompt;
        (void)target_hidden;
    }
    /// Ends a round: `path` lists the accepted node ids in order, `emitted` the committed
    /// tokens (path tokens then the correction or bonus token), and `target_hidden` the
    /// target's hidden rows for the previous last token followed by the path nodes.
    virtual void commit(std::span<const int> path, std::span<const int> emitted, const Tensor& target_hidden) {
        (void)path;
        (void)emitted;
        (void)target_hidden;
    }

    /// Full-vocabulary draft distribution for the token following `node`.
    virtual std::vector<double> distribution(int node) = 0;
    /// Registers a drafted token under `parent`; returns its node id.
    virtual int add_node(int parent, int token) = 0;
    /// Head multiply-accumulates per distribution() call, and the full-vocabulary cost.
    virtual std::size_t head_macs() const = 0;
    virtual std::size_t full_head_macs() const = 0;
};

struct DraftParams {
    std::size_t n_draft = 4;      // chain length
    std::size_t tree_budget = 0;  // > 0 selects tree drafting with that many nodes
    std::size_t max_depth = 4;
    std::vector<std::size_t> branching{3, 2, 1, 1};
    double temperature = 0.0;     // 0 = greedy chain; trees always pick top tokens
};

struct DraftCount {
    std::size_t evaluations = 0;  // distribution() calls
};

namespace detail {

/// Ids of the k most probable tokens, ties toward the lower id.
inline std::vector<int> top_tokens(const std::vector<double>& p, std::size_t k) {
    std::vector<int> ids;
    for (std::size_t i = 0; i < p.size(); ++i)
        if (p[i] > 0.0) ids.push_back(static_cast<int>(i));
    k = std::min(k, ids.size());
    std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(), [&](int a, int b) {
        return p[std::size_t(a)] > p[std::size_t(b)] || (p[std::size_t(a)] == p[std::size_t(b)] && a < b);
    });
    ids.resize(k);
    return ids;
}

} // namespace detail

/// Drafts a chain of n tokens: greedy (temperature 0) or sampled from q / temperature.
inline DraftBatch draft_chain(Drafter& d, std::size_t n, double temperature, std::mt19937_64& rng,
                              DraftCount* count = nullptr) {
    CPM4_REQUIRE(n >= 1, PreconditionError, "chain drafting needs n_draft >= 1");
    DraftBatch b;
    b.proposal = temperature > 0.0 ? Proposal::Sampled : Proposal::Deterministic;
    int parent = -1;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> p = d.distribution(parent);
        if (count) ++count->evaluations;
        int tok;
        if (temperature > 0.0) {
            if (temperature != 1.0) {
                double z = 0.0;
                for (double& v : p) z += (v = v > 0.0 ? std::pow(v, 1.0 / temperature) : 0.0);
                for (double& v : p) v /= z;
            }
            std::discrete_distribution<int> dist(p.begin(), p.end());
            tok = dist(rng);
        } else {
            tok = detail::top_tokens(p, 1).at(0);
        }
        b.tokens.push_back(tok);
        b.parents.push_back(parent);
        b.q.push_back(p[std::size_t(tok)]);
        b.depth.push_back(i);
        b.dists.push_back(std::move(p));
        parent = d.add_node(parent, tok);
    }
    return b;
}

/// Best-first tree drafting: candidates are ranked by cumulative draft probability and the
/// best is added until `budget` nodes exist. A node at depth t proposes its top
/// branching[t] children; nodes at max_depth - 1 are not expanded.
inline DraftBatch draft_tree(Drafter& d, std::size_t budget, std::size_t max_depth,
                             const std::vector<std::size_t>& branching, DraftCount* count = nullptr) {
    CPM4_REQUIRE(budget >= 1, PreconditionError, "tree drafting needs a budget >= 1");
    CPM4_REQUIRE(max_depth >= 1, PreconditionError, "tree drafting needs max_depth >= 1");
    struct Cand {
        double cum;
        std::uint64_t order;
        int parent;
        int token;
        double q;
        std::size_t depth;
        std::size_t dist;  // index into the distribution store
    };
    const auto worse = [](const Cand& a, const Cand& b) { return a.cum < b.cum || (a.cum == b.cum && a.order > b.order); };
    std::priority_queue<Cand, std::vector<Cand>, decltype(worse)> frontier(worse);
    std::vector<std::vector<double>> store;
    std::uint64_t order = 0;
    std::vector<double> cum_of;

    const auto expand = [&](int node, double cum, std::size_t depth) {
        if (depth >= max_depth) return;
        const std::size_t width = depth < branching.size() ? branching[depth] : 1;
        if (width == 0) return;
        store.push_back(d.distribution(node));
        if (count) ++count->evaluations;
        const std::size_t si = store.size() - 1;
        for (int t : detail::top_tokens(store[si], width))
            frontier.push({cum * store[si][std::size_t(t)], order++, node, t, store[si][std::size_t(t)], depth, si});
    };

    DraftBatch b;
    b.proposal = Proposal::Deterministic;
    std::vector<int> ids;  // batch index -> drafter node id
    expand(-1, 1.0, 0);
    while (b.size() < budget && !frontier.empty()) {
        const Cand c = frontier.top();
        frontier.pop();
        const int parent_batch = c.parent < 0 ? -1 : static_cast<int>(std::find(ids.begin(), ids.end(), c.parent) - ids.begin());
        b.tokens.push_back(c.token);
        b.parents.push_back(parent_batch);
        b.q.push_back(c.q);
        b.depth.push_back(c.depth);
        b.dists.push_back(store[c.dist]);
        ids.push_back(d.add_node(c.parent, c.token));
        if (b.size() < budget) expand(ids.back(), c.cum, c.depth + 1);
    }
    return b;
}

/// Chain or tree drafting per `p`.
inline DraftBatch draft(Drafter& d, const DraftParams& p, std::mt19937_64& rng, DraftCount* count = nullptr) {
    if (p.tree_budget > 0) return draft_tree(d, p.tree_budget, p.max_depth, p.branching, count);
    return draft_chain(d, p.n_draft, p.temperature, rng, count);
}

} // namespace cpm4::spec

// Copyright 2026 The cpm4kit Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "common/stats.hpp"
#include "common/test_util.hpp"
#include "cpm4/attention.hpp"
#include "cpm4/model.hpp"
#include "cpm4/mtp/head.hpp"
#include "cpm4/mtp/train.hpp"
#include "cpm4/niah.hpp"
#include "cpm4/quant/gptq.hpp"
#include "cpm4/quant/hessian.hpp"
#include "cpm4/quant/synthetic.hpp"
#include "cpm4/sparse_attention.hpp"
#include "cpm4/spec/drafter.hpp"
#include "cpm4/spec/freq_vocab.hpp"
#include "cpm4/spec/generate.hpp"
#include "cpm4/spec/reduced_head.hpp"
#include "cpm4/tree_mask.hpp"

using namespace cpm4;
using cpm4::testing::randn;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

template <class... Args>
std::string fmt(const char* f, Args... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

using Clock = std::chrono::steady_clock;
double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

BlockizedKVCache cache_from(const Tensor& k, const Tensor& v, const AttentionShape& s, KernelParams kp) {
    BlockizedKVCache c(s.n_kv_heads, s.head_dim, kp);
    for (std::size_t i = 0; i < k.rows(); ++i) c.append(k.row(i), v.row(i));
    c.sync_kernels();
    return c;
}

std::vector<int> random_tokens(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
    std::vector<int> t(n);
    for (int& x : t) x = int(rng() % vocab);
    return t;
}

// ---------------------------------------------------------------------------------------

Outcome dense_degradation() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(1);
    float worst = 0.0f;
    std::size_t rows = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t kv = 1 + rng() % 2, group = std::size_t(1) << (rng() % 3), hd = std::size_t(4) << (rng() % 3);
        const AttentionShape shape{kv * group, kv, hd};
        sparse::SparseAttentionConfig cfg;
        cfg.kernel_stride = std::size_t(4) << (rng() % 3);
        cfg.block_size = cfg.kernel_stride * (1 + rng() % 4);
        cfg.kernel_size = cfg.kernel_stride * (1 + rng() % 3);
        cfg.coarse_stride = cfg.kernel_stride << (rng() % 4);
        cfg.top_k = 1 + rng() % 6;
        cfg.n_init_blocks = rng() % 3;
        cfg.n_local_blocks = 1 + rng() % 3;
        cfg.use_approx_lse = rng() % 2;
        const std::size_t max_blocks = cfg.top_k + cfg.n_init_blocks + cfg.n_local_blocks;
        const std::size_t l = 1 + rng() % (max_blocks * cfg.block_size);
        const Tensor k = randn(l, shape.kv_width(), rng), v = randn(l, shape.kv_width(), rng);
        const Tensor q = randn(l, shape.q_width(), rng);
        const auto cache = cache_from(k, v, shape, cfg.kernel_params());
        const auto res = sparse::infllm_attention(q, cache, shape, cfg, 0);
        worst = std::max(worst, max_abs_diff(res.out, dense_attention(q, k, v, shape)));
        rows += l;
    }
    const double secs = since(t0);
    return {worst < 1e-5f && secs < 10.0,
            fmt("100 configs, %zu query rows, max |sparse - dense| = %.3g, %.2f s", rows, double(worst), secs)};
}

Outcome topk_oracle() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(2);
    int mismatches = 0, with_ties = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 1 + rng() % 64;
        sparse::RelevanceScores s;
        s.score.resize(n);
        s.forced.resize(n);
        int distinct = int(2 + rng() % 6);
        for (std::size_t j = 0; j < n; ++j) {
            s.score[j] = trial % 2 ? double(rng() % distinct) / 4.0 : std::uniform_real_distribution<double>(0, 1)(rng);
            s.forced[j] = rng() % 5 == 0;
        }
        const std::size_t k = rng() % (n + 3);
        const bool against = rng() % 2;
        // Oracle: stable descending sort of the non-forced blocks, so equal scores keep index order.
        std::vector<std::size_t> rest, expect;
        for (std::size_t j = 0; j < n; ++j) (s.forced[j] ? expect : rest).push_back(j);
        std::stable_sort(rest.begin(), rest.end(), [&](std::size_t a, std::size_t b) { return s.score[a] > s.score[b]; });
        std::size_t budget = against ? (k > expect.size() ? k - expect.size() : 0) : k;
        budget = std::min(budget, rest.size());
        expect.insert(expect.end(), rest.begin(), rest.begin() + std::ptrdiff_t(budget));
        std::sort(expect.begin(), expect.end());
        if (budget > 0 && budget < rest.size() && s.score[rest[budget - 1]] == s.score[rest[budget]]) ++with_ties;
        mismatches += sparse::select_topk(s, k, against) != expect;
    }
    const double secs = since(t0);
    return {mismatches == 0 && secs < 5.0,
            fmt("1000 vectors (%d with a tie at the cut), %d mismatches, %.2f s", with_ties, mismatches, secs)};
}

Outcome two_stage_cost() {
    const AttentionShape shape{4, 2, 16};
    const sparse::SparseAttentionConfig cfg;
    std::mt19937_64 rng(3);
    bool exact = true, monotone = true;
    double prev_ratio = 2.0;
    std::ostringstream os;
    for (std::size_t l : {512u, 2048u, 8192u}) {
        const Tensor k = randn(l, shape.kv_width(), rng), v = randn(l, shape.kv_width(), rng);
        const Tensor q = randn(1, shape.q_width(), rng);
        const auto cache = cache_from(k, v, shape, cfg.kernel_params());
        const auto res = sparse::infllm_attention(q, cache, shape, cfg, l - 1, true);
        std::size_t expect = 0;
        for (const auto& t : res.traces) expect += l / cfg.kernel_stride + t.selected.size() * cfg.block_size;
        exact = exact && res.stats.total() == expect && res.stats.query_groups == shape.n_kv_heads;
        const double ratio = double(res.stats.total()) / double(res.stats.dense_touches);
        monotone = monotone && ratio <= prev_ratio;
        prev_ratio = ratio;
        os << " l=" << l << ":" << res.stats.total() / res.stats.query_groups << "/" << l;
    }
    return {exact && monotone, "touches per query group =" + os.str() + (exact ? ", exact" : ", MISMATCH") +
                                   (monotone ? ", ratio non-increasing" : ", ratio INCREASES")};
}

Outcome lse_approximation() {
    std::mt19937_64 rng(4);
    const AttentionShape shape{2, 1, 8};
    const std::size_t s = 16, l = 4096;
    const Tensor k = randn(l, 8, rng), v = randn(l, 8, rng);
    bool equal = true;
    {
        const KernelParams kp{32, s, s};
        const auto cache = cache_from(k, v, shape, kp);
        for (int t = 0; t < 20; ++t) {
            const Tensor q = randn(1, 8, rng);
            equal = equal && sparse::approx_lse(q.row(0), cache.coarse_means(0), 0.35, s, s) ==
                                 sparse::exact_lse(q.row(0), cache.fine_means(0), 0.35);
        }
    }
    bool counts = true;
    std::ostringstream os;
    for (std::size_t sc : {2 * s, 4 * s, 8 * s}) {
        sparse::SparseAttentionConfig cfg;
        cfg.kernel_stride = s;
        cfg.coarse_stride = sc;
        cfg.use_approx_lse = true;
        const auto cache = cache_from(k, v, shape, cfg.kernel_params());
        const auto res = sparse::infllm_attention(randn(1, shape.q_width(), rng), cache, shape, cfg, l - 1);
        const std::size_t fine = l / s, coarse = res.stats.stage1_touches - fine;
        counts = counts && coarse * sc == fine * s;
        os << " s_c=" << sc << ":" << coarse << "/" << fine;
    }
    return {equal && counts, std::string(equal ? "approx == exact at s_c = s" : "approx != exact at s_c = s") +
                                 "; coarse/fine evaluations" + os.str()};
}

Outcome greedy_losslessness() {
    const auto t0 = Clock::now();
    ModelConfig c = ModelConfig::toy();
    c.n_layers = 2;
    ModelBundle target = init_model(c, 100);
    mtp::init_head(target, 300);
    c.n_layers = 1;
    const ModelBundle small = init_model(c, 200);
    std::mt19937_64 rng(5);
    spec::GenerateParams gp;
    gp.max_new_tokens = 24;
    std::size_t runs = 0, mismatches = 0, accepted = 0, calls = 0;
    std::vector<spec::FrequencyVocab> vocabs;
    for (double f : {0.1, 0.25, 1.0})
        vocabs.push_back(spec::FrequencyVocab::build(spec::zipf_corpus(256, 5000, 1.0, 6), 256, f));
    for (int p = 0; p < 50; ++p) {
        const auto prompt = random_tokens(2 + rng() % 14, 256, rng);
        const auto ref = spec::generate(target, prompt, gp).tokens;
        for (const auto& v : vocabs)
            for (bool tree : {false, true}) {
                spec::DraftParams dp;
                dp.n_draft = 4;
                if (tree) dp.tree_budget = 10;
                spec::MtpDrafter head(target, spec::ReducedHead::extract(target.lm_head(), v), 16);
                spec::ModelDrafter model(small, spec::ReducedHead::extract(small.lm_head(), v), 32);
                spec::ModelDrafter self(target, spec::ReducedHead::extract(target.lm_head(), v));
                for (spec::Drafter* d : {static_cast<spec::Drafter*>(&head), static_cast<spec::Drafter*>(&model),
                                         static_cast<spec::Drafter*>(&self)}) {
                    const auto r = spec::speculative_generate(target, *d, prompt, gp, dp);
                    mismatches += r.tokens != ref;
                    accepted += r.stats.total_accepted();
                    calls += r.stats.verify_calls();
                    ++runs;
                }
            }
    }
    const double secs = since(t0);
    return {mismatches == 0 && secs < 60.0,
            fmt("%zu runs (50 prompts x 3 fractions x chain/tree x 3 drafters), %zu mismatches, "
                "mean accepted %.2f, %.1f s",
                runs, mismatches, double(accepted) / double(calls), secs)};
}

Outcome sampled_losslessness() {
    const auto t0 = Clock::now();
    ModelConfig c;
    c.hidden_dim = 16;
    c.n_layers = 1;
    c.n_q_heads = 4;
    c.n_kv_heads = 2;
    c.head_dim = 4;
    c.ffn_dim = 32;
    c.vocab_size = 8;
    c.max_seq_len = 64;
    const ModelBundle target = init_model(c, 11);
    const ModelBundle small = init_model(c, 12);
    const std::vector<int> prompt{1, 5, 2};
    const double temp = 1.0;

    // Target joint distribution of the first two emitted tokens.
    std::vector<double> joint(64);
    const auto p1 = softmax(forward(target, prompt).logits.row(prompt.size() - 1), temp);
    for (int a = 0; a < 8; ++a) {
        auto ext = prompt;
        ext.push_back(a);
        const auto p2 = softmax(forward(target, ext).logits.row(ext.size() - 1), temp);
        for (int b = 0; b < 8; ++b) joint[std::size_t(a * 8 + b)] = p1[std::size_t(a)] * p2[std::size_t(b)];
    }
    const auto vocab = spec::FrequencyVocab::from_counts({9, 8, 7, 6, 5, 4, 3, 2}, 0.5);
    std::ostringstream os;
    bool pass = true;
    const std::size_t trials = 100000;
    for (bool tree : {false, true}) {
        std::vector<std::size_t> counts(64, 0);
        spec::DraftParams dp;
        dp.n_draft = 2;
        if (tree) dp.tree_budget = 4;
        spec::ModelDrafter d(small, spec::ReducedHead::extract(small.lm_head(), vocab));
        spec::GenerateParams gp;
        gp.max_new_tokens = 2;
        gp.temperature = temp;
        for (std::size_t t = 0; t < trials; ++t) {
            gp.seed = 1000000 * (tree ? 1 : 0) + t;
            const auto r = spec::speculative_generate(target, d, prompt, gp, dp);
            ++counts[std::size_t(r.tokens[0] * 8 + r.tokens[1])];
        }
        const double p = cpm4::testing::chi_square_p(counts, joint);
        pass = pass && p > 0.01;
        os << (tree ? ", tree " : "chain ") << "p = " << fmt("%.3f", p);
    }
    const double secs = since(t0);
    return {pass && secs < 60.0, fmt("|V|=8, 2 x %zu trials over 64 token pairs: ", trials) + os.str() +
                                     fmt(", %.1f s", secs)};
}

Outcome frspec_cost() {
    const std::size_t V = 32000;
    const auto corpus = spec::zipf_corpus(V, 200000, 1.0, 7);
    const auto plain = spec::FrequencyVocab::build(corpus, V, 0.25);
    const int special = plain.ranked_ids().back();  // the rarest id, so it is added on top
    const auto vocab = spec::FrequencyVocab::build(corpus, V, 0.25, {special});
    ModelConfig c = ModelConfig::toy();
    c.vocab_size = V;
    c.n_layers = 1;
    const ModelBundle b = init_model(c, 13);
    spec::ModelDrafter d(b, spec::ReducedHead::extract(b.lm_head(), vocab));
    spec::GenerateParams gp;
    gp.max_new_tokens = 12;
    const auto r = spec::speculative_generate(b, d, std::vector<int>{5, 17, 300}, gp, {});
    const std::size_t rows = vocab.subset_size(), dim = c.hidden_dim;
    bool ok = rows == 8001 && d.head_macs() == rows * dim && d.full_head_macs() == V * dim;
    for (const auto& row : r.stats.rows) {
        const std::size_t evals = row.head_macs_full / (V * dim);
        const double quarter = double(row.head_macs_full) / 4.0;
        ok = ok && row.head_macs_full == evals * V * dim &&
             std::fabs(double(row.head_macs_draft) - quarter) <= double(evals * dim);
    }
    // The reported reduction factor is exactly |V| / |V_high|.
    ok = ok && r.stats.full_macs() * rows == r.stats.draft_macs() * V && r.stats.draft_macs() > 0;
    const double factor = double(r.stats.full_macs()) / double(r.stats.draft_macs());
    return {ok, fmt("|V_high| = %zu of %zu, draft/full MACs = %.6f, reduction %.4f (|V|/|V_high| = %.4f)", rows, V,
                    double(r.stats.draft_macs()) / double(r.stats.full_macs()), factor, double(V) / double(rows))};
}

Outcome prefix_hessian_exactness() {
    int exact = 0;
    for (int t = 0; t < 100; ++t) {
        const double magnitude = t % 2 ? 10.0 : 0.0;
        const std::size_t d = 8 + std::size_t(t % 5) * 8;
        const auto a = quant::prefix_outlier_activations(3 + t % 4, 12 + t % 9, d, 4, magnitude, 500 + t);
        const auto h = quant::prefix_hessian(a.x, a.positions, 4);
        // Brute force: filter rows, then a plain triple loop in the same row order.
        std::vector<double> g(d * d, 0.0);
        std::size_t used = 0;
        for (std::size_t r = 0; r < a.x.rows(); ++r) {
            if (a.positions[r] < 4) continue;
            ++used;
            for (std::size_t i = 0; i < d; ++i)
                for (std::size_t j = 0; j < d; ++j) {
                    const std::size_t lo = std::min(i, j), hi = std::max(i, j);
                    g[i * d + j] += double(a.x(r, lo)) * double(a.x(r, hi));
                }
        }
        exact += h.h == g && h.rows_used == used;
    }
    return {exact == 100, fmt("%d of 100 calibration sets bit-exact (half with 10x-magnitude prefixes)", exact)};
}

Outcome pgptq_direction() {
    int wins = 0;
    for (int t = 0; t < 100; ++t) {
        const auto a = quant::prefix_outlier_activations(8, 32, 64, 4, 10.0, 1000 + t);
        std::mt19937_64 rng(t);
        const Tensor w = randn(32, 64, rng, 0.125f);
        quant::GptqOptions o;
        o.group_size = 32;
        const double lf =
            quant::proxy_loss(a.x, a.positions, 4, w, quant::dequantize(quant::gptq_quantize(w, quant::hessian(a.x), o)));
        const double lp = quant::proxy_loss(
            a.x, a.positions, 4, w, quant::dequantize(quant::gptq_quantize(w, quant::prefix_hessian(a.x, a.positions, 4), o)));
        wins += lp <= lf;
    }
    return {wins >= 90, fmt("P-GPTQ proxy loss <= GPTQ on positions >= 4 in %d of 100 paired trials", wins)};
}

Outcome gptq_sanity() {
    std::mt19937_64 rng(8);
    int exact = 0, exact_trials = 0;
    for (int bits : {4, 8})
        for (int t = 0; t < 10; ++t) {
            const int maxq = quant::max_code(bits);
            Tensor w(12, 64);
            for (std::size_t r = 0; r < 12; ++r)
                for (std::size_t c0 = 0; c0 < 64; c0 += 32) {
                    const float scale = std::ldexp(1.0f, -int(rng() % 4) - 2);
                    const int zero = int(rng() % std::uint64_t(maxq + 1));
                    for (std::size_t cc = c0; cc < c0 + 32; ++cc) {
                        int code = int(rng() % std::uint64_t(maxq + 1));
                        if (cc == c0) code = 0;
                        if (cc == c0 + 1) code = maxq;
                        w(r, cc) = scale * float(code - zero);
                    }
                }
            quant::GptqOptions o;
            o.group_size = 32;
            o.bits = bits;
            exact += quant::dequantize(quant::gptq_quantize(w, quant::hessian(randn(80, 64, rng)), o)) == w;
            ++exact_trials;
        }
    int wins = 0;
    for (int t = 0; t < 100; ++t) {
        const auto a = quant::prefix_outlier_activations(4, 32, 64, 0, 0.0, 100 + t);
        std::mt19937_64 r2(200 + t);
        const Tensor w = randn(32, 64, r2, 0.2f);
        quant::GptqOptions o;
        o.group_size = 32;
        const double lg = quant::proxy_loss(a.x, {}, 0, w, quant::dequantize(quant::gptq_quantize(w, quant::hessian(a.x), o)));
        const double lr = quant::proxy_loss(a.x, {}, 0, w, quant::dequantize(quant::quantize_rtn(w, 32)));
        wins += lg <= lr;
    }
    return {exact == exact_trials && wins >= 95,
            fmt("representable weights exact in %d of %d; GPTQ <= RTN in %d of 100", exact, exact_trials, wins)};
}

Outcome mtp_correctness() {
    ModelConfig c;
    c.hidden_dim = 16;
    c.n_layers = 2;
    c.n_q_heads = 4;
    c.n_kv_heads = 2;
    c.head_dim = 4;
    c.ffn_dim = 24;
    c.vocab_size = 256;
    c.max_seq_len = 64;
    ModelBundle b = init_model(c, 21);
    mtp::init_head(b, 22);
    std::mt19937_64 rng(23);
    const auto toks = random_tokens(12, 256, rng);
    const auto ps = mtp::to_params(b);

    mtp::ParamSet grads;
    mtp::graph_loss(c, ps, toks, {0.3, 0}, &grads);
    const auto coords = mtp::sample_coordinates(ps, 120, rng);
    const auto gc = mtp::grad_check(
        ps, [&](const mtp::ParamSet& p) { return mtp::graph_loss(c, p, toks, {0.3, 0}).total; }, grads, coords);

    ModelBundle flat = b;
    std::fill(flat.tensor("embed").storage().begin(), flat.tensor("embed").storage().end(), 0.0f);
    const auto fr = forward(flat, toks);
    const double ln_v = std::log(256.0);
    const double u_ntp = mtp::ntp_loss(fr.logits, toks), u_mtp = mtp::mtp_loss(mtp::MTPHead(flat), fr.hidden, toks);
    const auto ug = mtp::graph_loss(c, mtp::to_params(flat), toks, {});
    const double uerr = std::max({std::fabs(u_ntp - ln_v), std::fabs(u_mtp - ln_v), std::fabs(ug.ntp - ln_v),
                                  std::fabs(ug.mtp - ln_v)});

    bool affine = true;
    const auto r0 = mtp::graph_loss(c, ps, toks, {0.0, 0});
    for (double lam : {0.1, 0.3, 1.0, 3.0}) {
        const auto r = mtp::graph_loss(c, ps, toks, {lam, 0});
        affine = affine && r.ntp == r0.ntp && r.mtp == r0.mtp && r.total == r0.ntp + lam * r0.mtp;
    }
    return {gc.max_rel_err < 1e-4 && gc.coordinates >= 100 && uerr < 1e-9 && affine,
            fmt("grad check max rel err %.2e over %zu coords; uniform-logit |L - ln 256| = %.1e; lambda-affinity %s",
                gc.max_rel_err, gc.coordinates, uerr, affine ? "exact" : "BROKEN")};
}

Outcome mask_round_trip() {
    std::mt19937_64 rng(12);
    int ok = 0;
    for (int t = 0; t < 1000; ++t) {
        const std::size_t n = 1 + rng() % 64;
        std::vector<int> parents(n);
        for (std::size_t i = 0; i < n; ++i) parents[i] = int(rng() % (i + 1)) - 1;
        const auto m = PackedMask::from_parents(parents);
        const auto dense = m.unpack();
        std::vector<std::uint8_t> expect(n * n, 0);
        for (std::size_t i = 0; i < n; ++i)
            for (int a = int(i); a >= 0; a = parents[std::size_t(a)]) expect[i * n + std::size_t(a)] = 1;
        ok += dense == expect && PackedMask::pack(dense, n) == m && PackedMask::pack(dense, n).unpack() == dense;
    }
    return {ok == 1000, fmt("%d of 1000 random trees (1..64 nodes) round-trip and match the ancestor oracle", ok)};
}

Outcome needle_grid() {
    const auto t0 = Clock::now();
    const auto r = niah::run_grid({});
    const double secs = since(t0);
    std::size_t passed = 0;
    for (const auto& c : r.cells) passed += c.pass;
    return {r.all_pass() && r.false_passes() == 0 && secs < 120.0,
            fmt("%zu of %zu cells pass, %zu false passes in %zu controls, %.2f s", passed, r.cells.size(),
                r.false_passes(), r.controls.size(), secs)};
}

} // namespace

int main() {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"dense degradation", dense_degradation},
        {"top-k oracle", topk_oracle},
        {"two-stage cost model", two_stage_cost},
        {"LSE approximation", lse_approximation},
        {"speculative losslessness (greedy)", greedy_losslessness},
        {"speculative losslessness (sampled)", sampled_losslessness},
        {"FR-Spec cost accounting", frspec_cost},
        {"prefix Hessian exactness", prefix_hessian_exactness},
        {"P-GPTQ direction", pgptq_direction},
        {"GPTQ sanity", gptq_sanity},
        {"MTP correctness", mtp_correctness},
        {"mask round trip", mask_round_trip},
        {"synthetic needle grid", needle_grid},
    };
    int failed = 0, i = 0;
    for (const auto& [name, fn] : criteria) {
        ++i;
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        failed += !o.pass;
        std::printf("%s %2d. %s: %s\n", o.pass ? "PASS" : "FAIL", i, name, o.detail.c_str());
        std::fflush(stdout);
    }
    std::printf("%d of %d criteria passed\n", i - failed, i);
    return failed == 0 ? 0 : 1;
}

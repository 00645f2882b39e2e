// Copyright 2026 The cpm4kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cpm4/model.hpp"
#include "cpm4/mtp/head.hpp"
#include "cpm4/mtp/tape.hpp"

namespace cpm4::mtp {

struct LossReport {
    double ntp = 0.0;
    double mtp = 0.0;
    double lambda = 0.0;
    double total = 0.0;
};

inline LossReport combined_loss(double ntp, double mtp, double lambda) {
    CPM4_REQUIRE(lambda >= 0.0, ValidationError, "lambda must be non-negative");
    return {ntp, mtp, lambda, ntp + lambda * mtp};
}

/// Mean cross-entropy of logits rows against targets.
inline double cross_entropy(const Tensor& logits, std::span<const int> targets) {
    CPM4_REQUIRE(logits.rows() == targets.size() && !targets.empty(), ValidationError,
                 "cross-entropy needs one target per logits row");
    double sum = 0.0;
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        const int t = targets[r];
        CPM4_REQUIRE(t >= 0 && std::size_t(t) < logits.cols(), ValidationError, "target outside the vocabulary");
        sum += logsumexp(logits.row(r)) - double(logits(r, std::size_t(t)));
    }
    return sum / double(targets.size());
}

/// Next-token loss: logits rows 0..l-2 predict tokens 1..l-1, averaged over the l-1 predictions.
/// `logits` may carry a last row for position l-1, which is ignored.
inline double ntp_loss(const Tensor& logits, std::span<const int> tokens) {
    CPM4_REQUIRE(tokens.size() >= 2, PreconditionError, "next-token loss needs at least two tokens");
    CPM4_REQUIRE(logits.rows() == tokens.size() || logits.rows() == tokens.size() - 1, ValidationError,
                 "logits rows do not match the token count");
    Tensor head(tokens.size() - 1, logits.cols());
    std::copy_n(logits.data(), head.size(), head.data());
    return cross_entropy(head, tokens.subspan(1));
}

/// Second-next-token loss of the head: position i pairs hidden h_i with token x_{i+1} and
/// predicts x_{i+2}, averaged over the l-2 predictions.
inline double mtp_loss(const MTPHead& head, const Tensor& hidden, std::span<const int> tokens, std::size_t window = 0) {
    CPM4_REQUIRE(tokens.size() >= 3, PreconditionError, "MTP loss needs at least three tokens");
    CPM4_REQUIRE(hidden.rows() >= tokens.size() - 2, ValidationError, "hidden rows do not match the token count");
    const std::size_t n = tokens.size() - 2;
    Tensor h(n, hidden.cols());
    std::copy_n(hidden.data(), h.size(), h.data());
    const Tensor logits = head.logits(head.forward(h, tokens.subspan(1, n), window));
    return cross_entropy(logits, tokens.subspan(2));
}

/// 64-bit copies of model tensors, keyed by name. Vectors are 1 x d.
using ParamSet = std::map<std::string, Mat>;

inline ParamSet to_params(const ModelBundle& b) {
    ParamSet ps;
    for (const auto& [name, t] : b.tensors) {
        const auto r = static_cast<Eigen::Index>(t.rank() == 1 ? 1 : t.rows());
        const auto c = static_cast<Eigen::Index>(t.rank() == 1 ? t.size() : t.cols());
        Mat m(r, c);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = t[std::size_t(i)];
        ps.emplace(name, std::move(m));
    }
    return ps;
}

inline void write_params(const ParamSet& ps, ModelBundle& b) {
    for (const auto& [name, m] : ps) {
        Tensor& t = b.tensor(name);
        CPM4_REQUIRE(t.size() == std::size_t(m.size()), ValidationError, "parameter size mismatch for \"" + name + "\"");
        for (Eigen::Index i = 0; i < m.size(); ++i) t[std::size_t(i)] = static_cast<float>(m.data()[i]);
    }
}

struct GraphOptions {
    double lambda = 0.3;
    std::size_t window = 0;  // head attention window; 0 = unbounded
};

namespace detail {

struct Graph {
    Tape tape;
    std::map<std::string, Tape::Id> leaves;

    Tape::Id p(const std::string& name) const {
        auto it = leaves.find(name);
        CPM4_REQUIRE(it != leaves.end(), ValidationError, "missing parameter \"" + name + "\"");
        return it->second;
    }

    Tape::Id layer(const ModelConfig& c, const std::string& pre, Tape::Id x, const std::vector<std::size_t>& pos,
                   std::size_t window) {
        const AttentionShape s = c.attention_shape();
        Tape& t = tape;
        const auto a = t.rmsnorm(x, p(pre + "attn_norm"));
        const auto q = t.rope(t.matmul_t(a, p(pre + "wq")), s.n_q_heads, s.head_dim, pos, c.rope_base);
        const auto k = t.rope(t.matmul_t(a, p(pre + "wk")), s.n_kv_heads, s.head_dim, pos, c.rope_base);
        const auto v = t.matmul_t(a, p(pre + "wv"));
        const auto x1 = t.add(x, t.matmul_t(t.attention(q, k, v, s, window), p(pre + "wo")));
        const auto b = t.rmsnorm(x1, p(pre + "ffn_norm"));
        const auto f = t.matmul_t(t.swiglu(t.matmul_t(b, p(pre + "w_gate")), t.matmul_t(b, p(pre + "w_up"))),
                                  p(pre + "w_down"));
        return t.add(x1, f);
    }
};

inline std::vector<std::size_t> iota_positions(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    return p;
}

} // namespace detail

/// Combined objective L = L_NTP + lambda * L_MTP on one sequence in 64-bit arithmetic, with
/// gradients for every parameter when `grads` is given. Heads absent from `ps` contribute
/// no MTP term.
inline LossReport graph_loss(const ModelConfig& c, const ParamSet& ps, std::span<const int> tokens,
                             const GraphOptions& opt, ParamSet* grads = nullptr) {
    CPM4_REQUIRE(tokens.size() >= 3, PreconditionError, "training sequences need at least three tokens");
    CPM4_REQUIRE(opt.lambda >= 0.0, ValidationError, "lambda must be non-negative");
    for (int t : tokens)
        CPM4_REQUIRE(t >= 0 && std::size_t(t) < c.vocab_size, PreconditionError, "token outside the vocabulary");
    detail::Graph g;
    for (const auto& [name, m] : ps) g.leaves[name] = g.tape.leaf(m);
    Tape& t = g.tape;
    const std::size_t l = tokens.size();
    const std::vector<int> ids(tokens.begin(), tokens.end());

    auto x = t.gather(g.p("embed"), ids);
    const auto pos = detail::iota_positions(l);
    for (std::size_t i = 0; i < c.n_layers; ++i) x = g.layer(c, layer_prefix(i), x, pos, 0);
    const auto head_w = g.p(c.tied_embeddings ? "embed" : "lm_head");
    const auto logits = t.matmul_t(t.rmsnorm(t.rows(x, 0, Eigen::Index(l - 1)), g.p("final_norm")), head_w);
    const auto ntp = t.cross_entropy(logits, std::vector<int>(ids.begin() + 1, ids.end()));

    const bool with_head = ps.count("mtp.combiner") != 0;
    Tape::Id total = ntp;
    double mtp_value = 0.0;
    if (with_head) {
        const auto n = Eigen::Index(l - 2);
        const auto hn = t.rmsnorm(t.rows(x, 0, n), g.p("mtp.norm_h"));
        const auto en = t.rmsnorm(t.gather(g.p("embed"), std::vector<int>(ids.begin() + 1, ids.end() - 1)), g.p("mtp.norm_e"));
        auto hm = t.matmul_t(t.concat_cols(hn, en), g.p("mtp.combiner"));
        hm = g.layer(c, kLayerPrefix, hm, detail::iota_positions(l - 2), opt.window);
        const auto ml = t.matmul_t(t.rmsnorm(hm, g.p("mtp.out_norm")), head_w);
        const auto mtp = t.cross_entropy(ml, std::vector<int>(ids.begin() + 2, ids.end()));
        mtp_value = t.value(mtp)(0, 0);
        total = t.weighted_sum(ntp, 1.0, mtp, opt.lambda);
    }
    const LossReport rep = combined_loss(t.value(ntp)(0, 0), mtp_value, with_head ? opt.lambda : 0.0);
    CPM4_REQUIRE(std::isfinite(rep.total), NumericError, "loss is not finite");
    if (grads) {
        t.backward(total);
        grads->clear();
        for (const auto& [name, id] : g.leaves) grads->emplace(name, t.grad(id));
    }
    return rep;
}

struct Coordinate {
    std::string name;
    Eigen::Index index = 0;
};

/// `n` distinct coordinates drawn uniformly over all parameters whose name passes `keep`.
inline std::vector<Coordinate> sample_coordinates(const ParamSet& ps, std::size_t n, std::mt19937_64& rng,
                                                  const std::function<bool(const std::string&)>& keep = {}) {
    std::vector<std::pair<std::string, Eigen::Index>> spans;
    Eigen::Index total = 0;
    for (const auto& [name, m] : ps) {
        if (keep && !keep(name)) continue;
        spans.emplace_back(name, m.size());
        total += m.size();
    }
    CPM4_REQUIRE(total > 0, PreconditionError, "no parameters to sample");
    std::vector<Eigen::Index> flat;
    std::uniform_int_distribution<Eigen::Index> u(0, total - 1);
    std::vector<Coordinate> out;
    while (out.size() < std::min<std::size_t>(n, std::size_t(total))) {
        const Eigen::Index f = u(rng);
        if (std::find(flat.begin(), flat.end(), f) != flat.end()) continue;
        flat.push_back(f);
        Eigen::Index rem = f;
        for (const auto& [name, size] : spans) {
            if (rem < size) {
                out.push_back({name, rem});
                break;
            }
            rem -= size;
        }
    }
    return out;
}

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::size_t coordinates = 0;
    std::vector<double> analytic;
    std::vector<double> numeric;
};

/// Central finite differences against analytic gradients. The relative error of a
/// coordinate is |a - n| / max(|a|, |n|, floor); the floor keeps coordinates whose true
/// gradient is zero from dividing noise by noise.
inline GradCheckResult grad_check(ParamSet ps, const std::function<double(const ParamSet&)>& loss, const ParamSet& grads,
                                  const std::vector<Coordinate>& coords, double eps = 1e-5, double floor = 1e-7) {
    CPM4_REQUIRE(eps >= 1e-5 && eps <= 1e-3, PreconditionError, "finite-difference step must lie in [1e-5, 1e-3]");
    GradCheckResult res;
    for (const auto& c : coords) {
        double& x = ps.at(c.name).data()[c.index];
        const double x0 = x;
        x = x0 + eps;
        const double up = loss(ps);
        x = x0 - eps;
        const double down = loss(ps);
        x = x0;
        CPM4_REQUIRE(std::isfinite(up) && std::isfinite(down), NumericError, "loss is not finite");
        const double n = (up - down) / (2.0 * eps);
        const double a = grads.at(c.name).data()[c.index];
        res.analytic.push_back(a);
        res.numeric.push_back(n);
        res.max_rel_err = std::max(res.max_rel_err, std::fabs(a - n) / std::max({std::fabs(a), std::fabs(n), floor}));
        ++res.coordinates;
    }
    return res;
}

struct TrainConfig {
    std::size_t steps = 200;
    double lambda = 0.3;
    double lr = 0.05;
    std::size_t seq_len = 32;
    std::uint64_t seed = 0;
    std::size_t window = 0;
};

struct CurveRow {
    std::size_t step = 0;
    LossReport loss;
};

inline std::string curve_csv(const std::vector<CurveRow>& curve) {
    std::ostringstream os;
    os.precision(17);
    os << "step,L_NTP,L_MTP,L\n";
    for (const auto& r : curve) os << r.step << ',' << r.loss.ntp << ',' << r.loss.mtp << ',' << r.loss.total << '\n';
    return os.str();
}

class DivergenceError : public NumericError {
public:
    DivergenceError(const std::string& msg, std::vector<CurveRow> curve) : NumericError(msg), curve_(std::move(curve)) {}
    const std::vector<CurveRow>& curve() const noexcept { return curve_; }

private:
    std::vector<CurveRow> curve_;
};

/// Plain SGD on random windows of `corpus`, updating `b` in place (an MTP head is added when
/// missing). Aborts with DivergenceError once the loss exceeds ten times its initial value.
inline std::vector<CurveRow> train_toy(ModelBundle& b, std::span<const int> corpus, const TrainConfig& cfg) {
    CPM4_REQUIRE(cfg.steps >= 1, PreconditionError, "training needs at least one step");
    CPM4_REQUIRE(cfg.seq_len >= 3 && corpus.size() >= cfg.seq_len, PreconditionError,
                 "corpus is shorter than the training sequence length");
    std::mt19937_64 rng(cfg.seed);
    if (!has_head(b)) init_head(b, rng());
    ParamSet ps = to_params(b);
    ParamSet grads;
    std::vector<CurveRow> curve;
    std::uniform_int_distribution<std::size_t> start(0, corpus.size() - cfg.seq_len);
    GraphOptions go{cfg.lambda, cfg.window};
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const auto window = corpus.subspan(start(rng), cfg.seq_len);
        const LossReport rep = graph_loss(b.config, ps, window, go, &grads);
        curve.push_back({step, rep});
        if (rep.total > 10.0 * curve.front().loss.total) {
            std::ostringstream os;
            os << "training diverged at step " << step << ": loss " << rep.total << " exceeds 10x the initial "
               << curve.front().loss.total;
            throw DivergenceError(os.str(), curve);
        }
        for (auto& [name, m] : ps) m -= cfg.lr * grads.at(name);
    }
    write_params(ps, b);
    return curve;
}

} // namespace cpm4::mtp

// Copyright 2026 The cpm4kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "cpm4/attention.hpp"
#include "cpm4/error.hpp"
#include "cpm4/tensor.hpp"

namespace cpm4::mtp {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Reverse-mode tape over 64-bit matrices. Nodes are created in evaluation order and
/// backward() replays them in reverse.
class Tape {
public:
    using Id = std::size_t;

    Id leaf(Mat v) { return push(std::move(v), {}); }

    const Mat& value(Id i) const { return nodes_[i].value; }
    const Mat& grad(Id i) const { return nodes_[i].grad; }

    /// x W^T for x: n x in, W: out x in.
    Id matmul_t(Id x, Id w) {
        Mat y = value(x) * value(w).transpose();
        return push(std::move(y), [x, w](Tape& t, const Mat& g) {
            t.acc(x, g * t.value(w));
            t.acc(w, g.transpose() * t.value(x));
        });
    }

    Id add(Id a, Id b) {
        Mat y = value(a) + value(b);
        return push(std::move(y), [a, b](Tape& t, const Mat& g) {
            t.acc(a, g);
            t.acc(b, g);
        });
    }

    /// Row-wise RMS normalization with a 1 x d learned scale.
    Id rmsnorm(Id x, Id gain) {
        const Mat& xv = value(x);
        const auto d = static_cast<double>(xv.cols());
        Eigen::VectorXd inv(xv.rows());
        for (Eigen::Index r = 0; r < xv.rows(); ++r)
            inv(r) = 1.0 / std::sqrt(xv.row(r).squaredNorm() / d + double(kRmsEps));
        Mat y = (inv.asDiagonal() * xv).array().rowwise() * value(gain).row(0).array();
        return push(std::move(y), [x, gain, inv, d](Tape& t, const Mat& g) {
            const Mat& xv = t.value(x);
            const auto gv = t.value(gain).row(0).array();
            Mat dx(xv.rows(), xv.cols());
            Mat dg = Mat::Zero(1, xv.cols());
            for (Eigen::Index r = 0; r < xv.rows(); ++r) {
                const double s = inv(r);
                const auto gy = g.row(r).array();
                dg.row(0).array() += gy * xv.row(r).array() * s;
                const double proj = (gy * gv * xv.row(r).array()).sum();
                dx.row(r) = (s * gy * gv - xv.row(r).array() * (s * s * s * proj / d)).matrix();
            }
            t.acc(x, dx);
            t.acc(gain, dg);
        });
    }

    /// Interleaved rotary embedding of each head; row r sits at positions[r].
    Id rope(Id x, std::size_t n_heads, std::size_t head_dim, std::vector<std::size_t> positions, double base) {
        Mat y = value(x);
        rotate(y, n_heads, head_dim, positions, base, 1.0);
        return push(std::move(y), [x, n_heads, head_dim, positions, base](Tape& t, const Mat& g) {
            Mat dx = g;
            rotate(dx, n_heads, head_dim, positions, base, -1.0);
            t.acc(x, dx);
        });
    }

    /// Causal grouped-query attention over rows; window 0 is unbounded.
    Id attention(Id q, Id k, Id v, const AttentionShape& s, std::size_t window = 0) {
        const Mat &Q = value(q), &K = value(k), &V = value(v);
        const auto n = Q.rows();
        const auto hd = static_cast<Eigen::Index>(s.head_dim);
        const double scale = s.scale();
        std::vector<Mat> probs(s.n_q_heads, Mat::Zero(n, n));
        Mat out = Mat::Zero(n, Q.cols());
        for (std::size_t h = 0; h < s.n_q_heads; ++h) {
            const auto kvh = static_cast<Eigen::Index>(h / s.group_size());
            const auto qo = static_cast<Eigen::Index>(h) * hd, ko = kvh * hd;
            for (Eigen::Index i = 0; i < n; ++i) {
                const Eigen::Index j0 = window == 0 ? 0 : std::max<Eigen::Index>(0, i + 1 - Eigen::Index(window));
                double mx = -INFINITY;
                for (Eigen::Index j = j0; j <= i; ++j) {
                    probs[h](i, j) = Q.row(i).segment(qo, hd).dot(K.row(j).segment(ko, hd)) * scale;
                    mx = std::max(mx, probs[h](i, j));
                }
                double z = 0.0;
                for (Eigen::Index j = j0; j <= i; ++j) z += (probs[h](i, j) = std::exp(probs[h](i, j) - mx));
                for (Eigen::Index j = j0; j <= i; ++j) {
                    probs[h](i, j) /= z;
                    out.row(i).segment(qo, hd) += probs[h](i, j) * V.row(j).segment(ko, hd);
                }
            }
        }
        return push(std::move(out), [q, k, v, s, probs, scale, hd](Tape& t, const Mat& g) {
            const Mat &Q = t.value(q), &K = t.value(k), &V = t.value(v);
            const auto n = Q.rows();
            Mat dq = Mat::Zero(Q.rows(), Q.cols()), dk = Mat::Zero(K.rows(), K.cols()), dv = Mat::Zero(V.rows(), V.cols());
            for (std::size_t h = 0; h < s.n_q_heads; ++h) {
                const auto kvh = static_cast<Eigen::Index>(h / s.group_size());
                const auto qo = static_cast<Eigen::Index>(h) * hd, ko = kvh * hd;
                const Mat& P = probs[h];
                for (Eigen::Index i = 0; i < n; ++i) {
                    const auto go = g.row(i).segment(qo, hd);
                    Eigen::VectorXd dp(n);
                    double inner = 0.0;
                    for (Eigen::Index j = 0; j <= i; ++j) {
                        if (P(i, j) == 0.0) {
                            dp(j) = 0.0;
                            continue;
                        }
                        dv.row(j).segment(ko, hd) += P(i, j) * go;
                        dp(j) = go.dot(V.row(j).segment(ko, hd));
                        inner += P(i, j) * dp(j);
                    }
                    for (Eigen::Index j = 0; j <= i; ++j) {
                        if (P(i, j) == 0.0) continue;
                        const double ds = P(i, j) * (dp(j) - inner) * scale;
                        dq.row(i).segment(qo, hd) += ds * K.row(j).segment(ko, hd);
                        dk.row(j).segment(ko, hd) += ds * Q.row(i).segment(qo, hd);
                    }
                }
            }
            t.acc(q, dq);
            t.acc(k, dk);
            t.acc(v, dv);
        });
    }

    /// silu(gate) * up, elementwise.
    Id swiglu(Id gate, Id up) {
        const Mat& gv = value(gate);
        const Mat sig = (1.0 + (-gv.array()).exp()).inverse().matrix();
        Mat y = (gv.array() * sig.array() * value(up).array()).matrix();
        return push(std::move(y), [gate, up, sig](Tape& t, const Mat& g) {
            const auto gv = t.value(gate).array();
            const auto sg = sig.array();
            t.acc(gate, (g.array() * t.value(up).array() * sg * (1.0 + gv * (1.0 - sg))).matrix());
            t.acc(up, (g.array() * gv * sg).matrix());
        });
    }

    /// Rows of `table` at `ids`.
    Id gather(Id table, std::vector<int> ids) {
        const Mat& tv = value(table);
        Mat y(static_cast<Eigen::Index>(ids.size()), tv.cols());
        for (std::size_t i = 0; i < ids.size(); ++i) y.row(Eigen::Index(i)) = tv.row(ids[i]);
        return push(std::move(y), [table, ids](Tape& t, const Mat& g) {
            Mat d = Mat::Zero(t.value(table).rows(), t.value(table).cols());
            for (std::size_t i = 0; i < ids.size(); ++i) d.row(ids[i]) += g.row(Eigen::Index(i));
            t.acc(table, d);
        });
    }

    Id concat_cols(Id a, Id b) {
        const Mat &av = value(a), &bv = value(b);
        Mat y(av.rows(), av.cols() + bv.cols());
        y << av, bv;
        const auto ca = av.cols(), cb = bv.cols();
        return push(std::move(y), [a, b, ca, cb](Tape& t, const Mat& g) {
            t.acc(a, g.leftCols(ca));
            t.acc(b, g.rightCols(cb));
        });
    }

    Id rows(Id x, Eigen::Index begin, Eigen::Index count) {
        Mat y = value(x).middleRows(begin, count);
        return push(std::move(y), [x, begin, count](Tape& t, const Mat& g) {
            Mat d = Mat::Zero(t.value(x).rows(), t.value(x).cols());
            d.middleRows(begin, count) = g;
            t.acc(x, d);
        });
    }

    /// Mean cross-entropy of each logits row against its target: a 1 x 1 node.
    Id cross_entropy(Id logits, std::vector<int> targets) {
        const Mat& z = value(logits);
        CPM4_REQUIRE(static_cast<std::size_t>(z.rows()) == targets.size() && !targets.empty(), ValidationError,
                     "cross-entropy needs one target per logits row");
        Mat p(z.rows(), z.cols());
        double loss = 0.0;
        for (Eigen::Index r = 0; r < z.rows(); ++r) {
            const double mx = z.row(r).maxCoeff();
            p.row(r) = (z.row(r).array() - mx).exp().matrix();
            const double sum = p.row(r).sum();
            p.row(r) /= sum;
            loss += mx + std::log(sum) - z(r, targets[std::size_t(r)]);
        }
        const double n = static_cast<double>(z.rows());
        Mat y(1, 1);
        y(0, 0) = loss / n;
        return push(std::move(y), [logits, targets, p, n](Tape& t, const Mat& g) {
            Mat d = p;
            for (std::size_t r = 0; r < targets.size(); ++r) d(Eigen::Index(r), targets[r]) -= 1.0;
            t.acc(logits, d * (g(0, 0) / n));
        });
    }

    /// wa * a + wb * b for 1 x 1 nodes.
    Id weighted_sum(Id a, double wa, Id b, double wb) {
        Mat y(1, 1);
        y(0, 0) = wa * value(a)(0, 0) + wb * value(b)(0, 0);
        return push(std::move(y), [a, b, wa, wb](Tape& t, const Mat& g) {
            t.acc(a, g * wa);
            t.acc(b, g * wb);
        });
    }

    void backward(Id loss) {
        CPM4_REQUIRE(value(loss).size() == 1, PreconditionError, "backward needs a scalar loss");
        for (auto& n : nodes_) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
        nodes_[loss].grad(0, 0) = 1.0;
        for (std::size_t i = nodes_.size(); i-- > 0;)
            if (nodes_[i].back) nodes_[i].back(*this, nodes_[i].grad);
    }

private:
    struct Node {
        Mat value;
        Mat grad;
        std::function<void(Tape&, const Mat&)> back;
    };

    Id push(Mat v, std::function<void(Tape&, const Mat&)> back) {
        nodes_.push_back({std::move(v), Mat(), std::move(back)});
        return nodes_.size() - 1;
    }
    void acc(Id i, const Mat& g) { nodes_[i].grad += g; }

    static void rotate(Mat& y, std::size_t n_heads, std::size_t head_dim, const std::vector<std::size_t>& positions,
                       double base, double sign) {
        for (Eigen::Index r = 0; r < y.rows(); ++r)
            for (std::size_t h = 0; h < n_heads; ++h)
                for (std::size_t i = 0; i < head_dim / 2; ++i) {
                    const double theta =
                        double(positions[std::size_t(r)]) * std::pow(base, -2.0 * double(i) / double(head_dim));
                    const double c = std::cos(theta), s = sign * std::sin(theta);
                    const auto c0 = Eigen::Index(h * head_dim + 2 * i);
                    const double a = y(r, c0), b = y(r, c0 + 1);
                    y(r, c0) = a * c - b * s;
                    y(r, c0 + 1) = a * s + b * c;
                }
    }

    std::vector<Node> nodes_;
};

} // namespace cpm4::mtp

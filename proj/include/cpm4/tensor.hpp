// Copyright 2026 The cpm4kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cpm4/error.hpp"

namespace cpm4 {

/// Row-major f32 tensor of rank 1 or 2. A rank-1 tensor behaves as a single row.
class Tensor {
public:
    Tensor() = default;
    Tensor(std::size_t rows, std::size_t cols, float fill = 0.0f)
        : shape_{rows, cols}, data_(rows * cols, fill) {}
    explicit Tensor(std::vector<std::size_t> shape, float fill = 0.0f) : shape_(std::move(shape)) {
        CPM4_REQUIRE(shape_.size() == 1 || shape_.size() == 2, ValidationError,
                     "tensor rank must be 1 or 2");
        data_.assign(numel_of(shape_), fill);
    }
    Tensor(std::vector<std::size_t> shape, std::vector<float> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        CPM4_REQUIRE(shape_.size() == 1 || shape_.size() == 2, ValidationError,
                     "tensor rank must be 1 or 2");
        CPM4_REQUIRE(numel_of(shape_) == data_.size(), ValidationError,
                     "tensor data does not match shape");
    }

    static Tensor vector(std::size_t n, float fill = 0.0f) { return Tensor(std::vector<std::size_t>{n}, fill); }

    const std::vector<std::size_t>& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t rows() const noexcept { return shape_.size() == 2 ? shape_[0] : (shape_.empty() ? 0 : 1); }
    std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    float* data() noexcept { return data_.data(); }
    const float* data() const noexcept { return data_.data(); }
    std::vector<float>& storage() noexcept { return data_; }
    const std::vector<float>& storage() const noexcept { return data_; }

    std::span<float> row(std::size_t i) noexcept { return {data_.data() + i * cols(), cols()}; }
    std::span<const float> row(std::size_t i) const noexcept { return {data_.data() + i * cols(), cols()}; }

    float& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
    float operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }
    float& operator[](std::size_t i) noexcept { return data_[i]; }
    float operator[](std::size_t i) const noexcept { return data_[i]; }

    // Appends one row to a rank-2 tensor (rank-1 tensors are promoted).
    void push_row(std::span<const float> r) {
        if (shape_.empty()) shape_ = {0, r.size()};
        if (shape_.size() == 1) shape_ = {1, shape_[0]};
        CPM4_REQUIRE(r.size() == shape_[1], ValidationError, "row width mismatch");
        data_.insert(data_.end(), r.begin(), r.end());
        ++shape_[0];
    }

    void resize_rows(std::size_t n) {
        CPM4_REQUIRE(shape_.size() == 2, ValidationError, "resize_rows needs a rank-2 tensor");
        shape_[0] = n;
        data_.resize(n * shape_[1]);
    }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
    }

    friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

    static std::size_t numel_of(const std::vector<std::size_t>& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    }

private:
    std::vector<std::size_t> shape_;
    std::vector<float> data_;
};

inline double dot(std::span<const float> a, std::span<const float> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
    return acc;
}

// y = W x for W of shape out x in. Each output is an independent row dot, so results do not
// depend on how many rows are processed together.
inline void matvec(const Tensor& w, std::span<const float> x, std::span<float> y) {
    for (std::size_t o = 0; o < w.rows(); ++o) y[o] = static_cast<float>(dot(w.row(o), x));
}

/// Applies a linear layer row by row: out = x W^T.
inline Tensor linear(const Tensor& x, const Tensor& w) {
    CPM4_REQUIRE(x.cols() == w.cols(), ValidationError, "linear: input width does not match weight");
    Tensor out(x.rows(), w.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) matvec(w, x.row(r), out.row(r));
    return out;
}

inline constexpr float kRmsEps = 1e-6f;

inline void rmsnorm(std::span<const float> x, std::span<const float> weight, std::span<float> out) {
    double ss = 0.0;
    for (float v : x) ss += static_cast<double>(v) * v;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + kRmsEps);
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>(x[i] * inv * weight[i]);
}

inline Tensor rmsnorm_rows(const Tensor& x, const Tensor& weight) {
    Tensor out(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) rmsnorm(x.row(r), weight.row(0), out.row(r));
    return out;
}

inline float silu(float v) { return static_cast<float>(v / (1.0 + std::exp(-static_cast<double>(v)))); }

/// Numerically stable log-sum-exp (max subtraction, 64-bit accumulation).
inline double logsumexp(std::span<const double> scores) {
    CPM4_REQUIRE(!scores.empty(), PreconditionError, "logsumexp of an empty vector");
    const double mx = *std::max_element(scores.begin(), scores.end());
    if (!std::isfinite(mx)) return mx;
    double acc = 0.0;
    for (double s : scores) acc += std::exp(s - mx);
    return mx + std::log(acc);
}

inline double logsumexp(std::span<const float> scores) {
    std::vector<double> tmp(scores.begin(), scores.end());
    return logsumexp(std::span<const double>(tmp));
}

/// Softmax of logits / temperature with 64-bit accumulation.
inline std::vector<double> softmax(std::span<const float> logits, double temperature = 1.0) {
    CPM4_REQUIRE(!logits.empty(), PreconditionError, "softmax of an empty vector");
    std::vector<double> p(logits.size());
    double mx = -INFINITY;
    for (float v : logits) mx = std::max(mx, static_cast<double>(v) / temperature);
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(static_cast<double>(logits[i]) / temperature - mx);
        sum += p[i];
    }
    for (double& v : p) v /= sum;
    return p;
}

/// Index of the maximum; ties resolve to the lowest index.
template <class T>
std::size_t argmax(std::span<const T> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

template <class T>
std::size_t argmax(const std::vector<T>& v) {
    return argmax(std::span<const T>(v));
}

inline float max_abs_diff(std::span<const float> a, std::span<const float> b) {
    CPM4_REQUIRE(a.size() == b.size(), ValidationError, "max_abs_diff: size mismatch");
    float m = 0.0f;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

inline float max_abs_diff(const Tensor& a, const Tensor& b) {
    CPM4_REQUIRE(a.shape() == b.shape(), ValidationError, "max_abs_diff: shape mismatch");
    return max_abs_diff(std::span<const float>(a.storage()), std::span<const float>(b.storage()));
}

inline Tensor random_normal(std::size_t rows, std::size_t cols, std::mt19937_64& rng, float stddev = 1.0f) {
    std::normal_distribution<float> dist(0.0f, stddev);
    Tensor t(rows, cols);
    for (float& v : t.storage()) v = dist(rng);
    return t;
}

} // namespace cpm4

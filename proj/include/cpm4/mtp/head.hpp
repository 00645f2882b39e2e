// Copyright 2026 The cpm4kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <random>
#include <span>
#include <string>
#include <vector>

#include "cpm4/model.hpp"

namespace cpm4::mtp {

inline const std::string kPrefix = "mtp.";
inline const std::string kLayerPrefix = "mtp.layer.";

/// Names and shapes of the head's own tensors. The embedding and LM head are the model's.
inline std::map<std::string, std::vector<std::size_t>> head_shapes(const ModelConfig& c) {
    auto s = layer_shapes(c, kLayerPrefix);
    s["mtp.combiner"] = {c.hidden_dim, 2 * c.hidden_dim};
    s["mtp.norm_h"] = {c.hidden_dim};
    s["mtp.norm_e"] = {c.hidden_dim};
    s["mtp.out_norm"] = {c.hidden_dim};
    return s;
}

inline bool has_head(const ModelBundle& b) {
    for (const auto& [name, shape] : head_shapes(b.config)) {
        if (!b.has(name)) return false;
        CPM4_REQUIRE(b.tensor(name).shape() == shape, ValidationError, "shape mismatch for tensor \"" + name + "\"");
    }
    return true;
}

/// Adds a freshly initialized head to `b`.
inline void init_head(ModelBundle& b, std::uint64_t seed) {
    const ModelConfig& c = b.config;
    std::mt19937_64 rng(seed);
    init_layer(b.tensors, c, kLayerPrefix, rng);
    b.tensors["mtp.combiner"] =
        random_normal(c.hidden_dim, 2 * c.hidden_dim, rng, static_cast<float>(1.0 / std::sqrt(2.0 * double(c.hidden_dim))));
    for (const char* n : {"mtp.norm_h", "mtp.norm_e", "mtp.out_norm"}) b.tensors[n] = Tensor::vector(c.hidden_dim, 1.0f);
}

/// Inference view of the head. Holds a reference to the bundle, so the embedding and output
/// head are the model's own tensors.
class MTPHead {
public:
    explicit MTPHead(const ModelBundle& b) : b_(&b) {
        CPM4_REQUIRE(has_head(b), ValidationError, "model has no MTP head");
    }

    const ModelBundle& bundle() const noexcept { return *b_; }
    const Tensor& embedding() const { return b_->embedding(); }
    const Tensor& lm_head() const { return b_->lm_head(); }
    LayerRefs layer() const { return b_->layer_at(kLayerPrefix); }

    /// Linear(Concat(Norm(h_i), Norm(Emb(x_{i+1})))) for each row.
    Tensor combine(const Tensor& h, std::span<const int> next_tokens) const {
        const std::size_t d = b_->config.hidden_dim;
        CPM4_REQUIRE(h.cols() == d && h.rows() == next_tokens.size(), ValidationError,
                     "hidden rows and tokens differ in shape");
        const Tensor& emb = embedding();
        Tensor cat(h.rows(), 2 * d);
        for (std::size_t i = 0; i < h.rows(); ++i) {
            const int t = next_tokens[i];
            CPM4_REQUIRE(t >= 0 && static_cast<std::size_t>(t) < b_->config.vocab_size, PreconditionError,
                         "token id " + std::to_string(t) + " outside the vocabulary");
            rmsnorm(h.row(i), b_->tensor("mtp.norm_h").row(0), cat.row(i).subspan(0, d));
            rmsnorm(emb.row(std::size_t(t)), b_->tensor("mtp.norm_e").row(0), cat.row(i).subspan(d, d));
        }
        return linear(cat, b_->tensor("mtp.combiner"));
    }

    /// Combined rows through the head's transformer layer, appending to `cache`.
    Tensor forward(const Tensor& h, std::span<const int> next_tokens, BlockizedKVCache& cache,
                   std::span<const RowContext> contexts, std::size_t window = 0) const {
        const Tensor x = combine(h, next_tokens);
        AttentionOptions opt;
        opt.window = window;
        return layer_forward(layer(), x, cache, contexts, b_->config.attention_shape(), b_->config.rope_base, opt);
    }

    /// Causal pass over a whole sequence with a fresh cache.
    Tensor forward(const Tensor& h, std::span<const int> next_tokens, std::size_t window = 0) const {
        BlockizedKVCache cache(b_->config.n_kv_heads, b_->config.head_dim);
        const auto ctx = detail::causal_contexts(h.rows(), 0);
        return forward(h, next_tokens, cache, ctx, window);
    }

    Tensor normalize(const Tensor& h_mtp) const { return rmsnorm_rows(h_mtp, b_->tensor("mtp.out_norm")); }
    Tensor logits(const Tensor& h_mtp) const { return linear(normalize(h_mtp), lm_head()); }

private:
    const ModelBundle* b_;
};

} // namespace cpm4::mtp

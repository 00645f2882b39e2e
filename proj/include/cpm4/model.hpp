// Copyright 2026 The cpm4kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cpm4/attention.hpp"
#include "cpm4/container.hpp"
#include "cpm4/error.hpp"
#include "cpm4/kv_cache.hpp"
#include "cpm4/quant/quantized_linear.hpp"
#include "cpm4/sparse_attention.hpp"
#include "cpm4/tensor.hpp"
#include "cpm4/tree_mask.hpp"

namespace cpm4 {

struct ModelConfig {
    std::size_t hidden_dim = 64;
    std::size_t n_layers = 4;
    std::size_t n_q_heads = 8;
    std::size_t n_kv_heads = 2;
    std::size_t head_dim = 8;
    std::size_t ffn_dim = 128;
    std::size_t vocab_size = 256;
    std::size_t max_seq_len = 4096;
    double rope_base = 10000.0;
    bool tied_embeddings = true;

    static ModelConfig toy() { return {}; }

    AttentionShape attention_shape() const { return {n_q_heads, n_kv_heads, head_dim}; }
    std::size_t group_size() const noexcept { return n_q_heads / n_kv_heads; }

    void validate() const {
        CPM4_REQUIRE(hidden_dim > 0 && n_layers > 0 && n_q_heads > 0 && n_kv_heads > 0 && head_dim > 0 && ffn_dim > 0 &&
                         vocab_size > 0 && max_seq_len > 0,
                     ValidationError, "model dimensions must be positive");
        CPM4_REQUIRE(n_q_heads % n_kv_heads == 0, ValidationError, "n_kv_heads must divide n_q_heads");
        CPM4_REQUIRE(hidden_dim == n_q_heads * head_dim, ValidationError, "hidden_dim must equal n_q_heads * head_dim");
        CPM4_REQUIRE(head_dim % 2 == 0, ValidationError, "rotary embedding needs an even head_dim");
        CPM4_REQUIRE(rope_base > 0.0, ValidationError, "rope_base must be positive");
    }

    nlohmann::json to_json() const {
        return {{"hidden_dim", hidden_dim}, {"n_layers", n_layers},   {"n_q_heads", n_q_heads},
                {"n_kv_heads", n_kv_heads}, {"head_dim", head_dim},   {"ffn_dim", ffn_dim},
                {"vocab_size", vocab_size}, {"max_seq_len", max_seq_len}, {"rope_base", rope_base},
                {"tied_embeddings", tied_embeddings}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        try {
            c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
            c.n_layers = j.at("n_layers").get<std::size_t>();
            c.n_q_heads = j.at("n_q_heads").get<std::size_t>();
            c.n_kv_heads = j.at("n_kv_heads").get<std::size_t>();
            c.head_dim = j.at("head_dim").get<std::size_t>();
            c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
            c.vocab_size = j.at("vocab_size").get<std::size_t>();
            c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
            c.rope_base = j.at("rope_base").get<double>();
            c.tied_embeddings = j.at("tied_embeddings").get<bool>();
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("model config metadata is malformed: ") + e.what());
        }
        return c;
    }
};

/// Read-only references to one transformer layer's parameters.
struct LayerRefs {
    const Tensor& attn_norm;
    const Tensor& wq;
    const Tensor& wk;
    const Tensor& wv;
    const Tensor& wo;
    const Tensor& ffn_norm;
    const Tensor& w_gate;
    const Tensor& w_up;
    const Tensor& w_down;
};

inline const std::vector<std::string>& layer_linear_names() {
    static const std::vector<std::string> names = {"wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"};
    return names;
}

inline std::string layer_prefix(std::size_t i) { return "layers." + std::to_string(i) + "."; }

/// Expected shape of every tensor of one layer under `prefix`.
inline std::map<std::string, std::vector<std::size_t>> layer_shapes(const ModelConfig& c, const std::string& prefix) {
    const std::size_t d = c.hidden_dim, qw = c.n_q_heads * c.head_dim, kw = c.n_kv_heads * c.head_dim;
    return {{prefix + "attn_norm", {d}},     {prefix + "wq", {qw, d}},         {prefix + "wk", {kw, d}},
            {prefix + "wv", {kw, d}},        {prefix + "wo", {d, qw}},         {prefix + "ffn_norm", {d}},
            {prefix + "w_gate", {c.ffn_dim, d}}, {prefix + "w_up", {c.ffn_dim, d}}, {prefix + "w_down", {d, c.ffn_dim}}};
}

/// Config plus named f32 tensors. Tensors outside the core model (e.g. the "mtp." head)
/// travel along untouched.
struct ModelBundle {
    ModelConfig config;
    std::map<std::string, Tensor> tensors;

    const Tensor& tensor(const std::string& name) const {
        auto it = tensors.find(name);
        CPM4_REQUIRE(it != tensors.end(), ValidationError, "missing tensor \"" + name + "\"");
        return it->second;
    }
    Tensor& tensor(const std::string& name) {
        auto it = tensors.find(name);
        CPM4_REQUIRE(it != tensors.end(), ValidationError, "missing tensor \"" + name + "\"");
        return it->second;
    }
    bool has(const std::string& name) const { return tensors.count(name) != 0; }

    const Tensor& embedding() const { return tensor("embed"); }
    const Tensor& lm_head() const { return config.tied_embeddings ? tensor("embed") : tensor("lm_head"); }
    const Tensor& final_norm() const { return tensor("final_norm"); }

    LayerRefs layer(std::size_t i) const { return layer_at(layer_prefix(i)); }
    LayerRefs layer_at(const std::string& p) const {
        return {tensor(p + "attn_norm"), tensor(p + "wq"),       tensor(p + "wk"),   tensor(p + "wv"),    tensor(p + "wo"),
                tensor(p + "ffn_norm"),  tensor(p + "w_gate"), tensor(p + "w_up"), tensor(p + "w_down")};
    }

    std::map<std::string, std::vector<std::size_t>> expected_shapes() const {
        std::map<std::string, std::vector<std::size_t>> s;
        s["embed"] = {config.vocab_size, config.hidden_dim};
        s["final_norm"] = {config.hidden_dim};
        if (!config.tied_embeddings) s["lm_head"] = {config.vocab_size, config.hidden_dim};
        for (std::size_t i = 0; i < config.n_layers; ++i) s.merge(layer_shapes(config, layer_prefix(i)));
        return s;
    }

    void validate() const {
        config.validate();
        for (const auto& [name, shape] : expected_shapes()) {
            auto it = tensors.find(name);
            CPM4_REQUIRE(it != tensors.end(), ValidationError, "missing tensor \"" + name + "\"");
            if (it->second.shape() != shape) throw ValidationError("shape mismatch for tensor \"" + name + "\"");
        }
        for (const auto& [name, t] : tensors) {
            CPM4_REQUIRE(!name.empty(), ValidationError, "empty tensor name");
            CPM4_REQUIRE(t.all_finite(), ValidationError, "non-finite values in tensor \"" + name + "\"");
        }
    }
};

inline void init_layer(std::map<std::string, Tensor>& out, const ModelConfig& c, const std::string& prefix,
                       std::mt19937_64& rng) {
    for (const auto& [name, shape] : layer_shapes(c, prefix)) {
        if (shape.size() == 1) {
            out[name] = Tensor(shape, 1.0f);
        } else {
            out[name] = random_normal(shape[0], shape[1], rng, static_cast<float>(1.0 / std::sqrt(double(shape[1]))));
        }
    }
}

/// Randomly initialized model (deterministic in `seed`).
inline ModelBundle init_model(const ModelConfig& c, std::uint64_t seed) {
    c.validate();
    std::mt19937_64 rng(seed);
    ModelBundle b;
    b.config = c;
    b.tensors["embed"] = random_normal(c.vocab_size, c.hidden_dim, rng, 0.5f);
    b.tensors["final_norm"] = Tensor::vector(c.hidden_dim, 1.0f);
    if (!c.tied_embeddings)
        b.tensors["lm_head"] = random_normal(c.vocab_size, c.hidden_dim, rng, 0.5f);
    for (std::size_t i = 0; i < c.n_layers; ++i) init_layer(b.tensors, c, layer_prefix(i), rng);
    return b;
}

inline Container to_container(const ModelBundle& b) {
    Container c;
    c.metadata["config"] = b.config.to_json();
    for (const auto& [name, t] : b.tensors) c.put_f32(name, t);
    return c;
}

inline ModelBundle from_container(const Container& c) {
    CPM4_REQUIRE(c.metadata.contains("config"), FormatError, "container has no model config metadata");
    ModelBundle b;
    b.config = ModelConfig::from_json(c.metadata["config"]);
    for (const auto& [name, e] : c.entries) {
        if (e.dtype == "f32")
            b.tensors[name] = c.get_f32(name);
        else if (e.dtype == "q4g" || e.dtype == "q8g")
            b.tensors[name] = quant::dequantize(quant::decode_entry(e, name));
        else
            throw FormatError("tensor \"" + name + "\" has unknown dtype \"" + e.dtype + "\"");
    }
    b.validate();
    return b;
}

inline void save_model(const ModelBundle& b, const std::filesystem::path& path) {
    b.validate();
    write_container(to_container(b), path);
}

/// Loads a CPM4 container. Quantized tensors are dequantized to f32.
inline ModelBundle load_model(const std::filesystem::path& path) {
    CPM4_REQUIRE(std::filesystem::exists(path), IoError, "model file not found: " + path.string());
    return from_container(read_container(path));
}

/// Rotates interleaved pairs (2i, 2i+1) of each head by pos * base^(-2i/head_dim).
inline void apply_rope(std::span<float> row, std::size_t n_heads, std::size_t head_dim, std::size_t pos, double base) {
    for (std::size_t h = 0; h < n_heads; ++h) {
        for (std::size_t i = 0; i < head_dim / 2; ++i) {
            const double theta = static_cast<double>(pos) * std::pow(base, -2.0 * double(i) / double(head_dim));
            const double c = std::cos(theta), s = std::sin(theta);
            float& x0 = row[h * head_dim + 2 * i];
            float& x1 = row[h * head_dim + 2 * i + 1];
            const double a = x0, bb = x1;
            x0 = static_cast<float>(a * c - bb * s);
            x1 = static_cast<float>(a * s + bb * c);
        }
    }
}

/// One KV cache per layer.
struct ModelCache {
    std::vector<BlockizedKVCache> layers;

    ModelCache() = default;
    ModelCache(const ModelConfig& c, KernelParams kp = {}) {
        for (std::size_t i = 0; i < c.n_layers; ++i) layers.emplace_back(c.n_kv_heads, c.head_dim, kp);
    }
    std::size_t length() const noexcept { return layers.empty() ? 0 : layers.front().length(); }
    void truncate(std::size_t len) {
        for (auto& l : layers) l.truncate(len);
    }
    void keep(std::size_t prefix_len, std::span<const std::size_t> rows) {
        for (auto& l : layers) l.keep(prefix_len, rows);
    }
};

enum class AttentionMode { Dense, Sparse };

struct AttentionOptions {
    AttentionMode mode = AttentionMode::Dense;
    sparse::SparseAttentionConfig sparse{};
    std::size_t window = 0;                               // dense mode only; 0 = unbounded
    sparse::SparseStats* stats = nullptr;                 // sparse mode counters
    std::vector<sparse::SelectionTrace>* traces = nullptr;  // sparse mode selection traces
};

/// Observes every linear layer: (qualified weight name, input rows, output rows).
using LinearTap = std::function<void(const std::string&, const Tensor&, const Tensor&)>;

/// Runs one pre-norm transformer layer (GQA attention + SwiGLU MLP) over the rows of `x`.
/// The rows' keys/values are appended to `cache` first; row i then attends contexts[i].
inline Tensor layer_forward(const LayerRefs& w, const Tensor& x, BlockizedKVCache& cache,
                            std::span<const RowContext> contexts, const AttentionShape& shape, double rope_base,
                            const AttentionOptions& opt, const LinearTap* tap = nullptr, const std::string& prefix = {}) {
    const auto lin = [&](const Tensor& in, const Tensor& weight, const char* name) {
        Tensor out = linear(in, weight);
        if (tap && *tap) (*tap)(prefix + name, in, out);
        return out;
    };
    const Tensor a = rmsnorm_rows(x, w.attn_norm);
    Tensor q = lin(a, w.wq, "wq");
    Tensor k = lin(a, w.wk, "wk");
    const Tensor v = lin(a, w.wv, "wv");
    for (std::size_t i = 0; i < x.rows(); ++i) {
        apply_rope(q.row(i), shape.n_q_heads, shape.head_dim, contexts[i].position, rope_base);
        apply_rope(k.row(i), shape.n_kv_heads, shape.head_dim, contexts[i].position, rope_base);
        cache.append(k.row(i), v.row(i));
    }

    Tensor att;
    if (opt.mode == AttentionMode::Sparse) {
        cache.sync_kernels();
        auto res = sparse::infllm_attention(q, cache, contexts, shape, opt.sparse, opt.traces != nullptr);
        if (opt.stats) *opt.stats += res.stats;
        if (opt.traces) opt.traces->insert(opt.traces->end(), res.traces.begin(), res.traces.end());
        att = std::move(res.out);
    } else {
        att = Tensor(x.rows(), shape.q_width());
        const std::size_t gw = shape.group_size() * shape.head_dim;
        const CacheRows rows{cache};
        for (std::size_t i = 0; i < x.rows(); ++i) {
            const ContextView ctx = contexts[i].view();
            const LogicalRange r = window_range(ctx, opt.window);
            for (std::size_t h = 0; h < shape.n_kv_heads; ++h)
                attend_group(rows, h, q.row(i).subspan(h * gw, gw), ctx, std::span(&r, 1), shape.head_dim, shape.scale(),
                             att.row(i).subspan(h * gw, gw));
        }
    }

    const Tensor o = lin(att, w.wo, "wo");
    Tensor x1 = x;
    for (std::size_t i = 0; i < x1.size(); ++i) x1[i] += o[i];
    const Tensor b = rmsnorm_rows(x1, w.ffn_norm);
    const Tensor g = lin(b, w.w_gate, "w_gate");
    const Tensor u = lin(b, w.w_up, "w_up");
    Tensor hmid(g.rows(), g.cols());
    for (std::size_t i = 0; i < hmid.size(); ++i) hmid[i] = silu(g[i]) * u[i];
    const Tensor f = lin(hmid, w.w_down, "w_down");
    for (std::size_t i = 0; i < x1.size(); ++i) x1[i] += f[i];
    return x1;
}

struct ForwardOptions {
    AttentionOptions attention{};
    // Tree-structured input: the new tokens form a draft region whose row i attends the cached
    // prefix plus its ancestors-or-self. Positions follow tree depth.
    const PackedMask* tree = nullptr;
    LinearTap tap{};
    bool compute_logits = true;
};

struct ForwardResult {
    Tensor logits;  // n x vocab
    Tensor hidden;  // n x d, last layer output before the final norm
};

inline std::vector<RowContext> make_contexts(std::size_t base, std::size_t n, const PackedMask* tree) {
    if (tree == nullptr) return detail::causal_contexts(n, base);
    CPM4_REQUIRE(tree->size() == n, PreconditionError, "tree mask size differs from the token count");
    return detail::tree_contexts(*tree, base);
}

inline Tensor output_logits(const ModelBundle& b, const Tensor& hidden) {
    return linear(rmsnorm_rows(hidden, b.final_norm()), b.lm_head());
}

/// Runs the model over `tokens` with explicit per-row contexts. The new rows are appended to
/// `cache` at physical positions cache.length() + i; contexts may reference any earlier row.
inline ForwardResult forward_rows(const ModelBundle& b, std::span<const int> tokens, ModelCache& cache,
                                  std::span<const RowContext> contexts, const ForwardOptions& opt = {}) {
    const ModelConfig& c = b.config;
    CPM4_REQUIRE(!tokens.empty(), PreconditionError, "forward needs at least one token");
    CPM4_REQUIRE(contexts.size() == tokens.size(), PreconditionError, "one context per token required");
    CPM4_REQUIRE(cache.layers.size() == c.n_layers, PreconditionError, "cache layer count differs from the model");
    for (int t : tokens)
        CPM4_REQUIRE(t >= 0 && static_cast<std::size_t>(t) < c.vocab_size, PreconditionError,
                     "token id " + std::to_string(t) + " outside the vocabulary");
    const std::size_t end = cache.length() + tokens.size();
    for (const auto& rc : contexts) {
        CPM4_REQUIRE(rc.position < c.max_seq_len, PreconditionError, "position overflow beyond max_seq_len");
        CPM4_REQUIRE(rc.prefix_len <= end && rc.prefix_len + rc.tail.size() > 0, PreconditionError,
                     "row context outside the cache");
        for (std::size_t r : rc.tail) CPM4_REQUIRE(r < end, PreconditionError, "row context outside the cache");
    }

    const Tensor& emb = b.embedding();
    Tensor x(tokens.size(), c.hidden_dim);
    for (std::size_t i = 0; i < tokens.size(); ++i)
        std::copy_n(emb.row(static_cast<std::size_t>(tokens[i])).begin(), c.hidden_dim, x.row(i).begin());

    const AttentionShape shape = c.attention_shape();
    const LinearTap* tap = opt.tap ? &opt.tap : nullptr;
    for (std::size_t l = 0; l < c.n_layers; ++l)
        x = layer_forward(b.layer(l), x, cache.layers[l], contexts, shape, c.rope_base, opt.attention, tap, layer_prefix(l));

    ForwardResult r;
    if (opt.compute_logits) r.logits = output_logits(b, x);
    r.hidden = std::move(x);
    return r;
}

/// Runs the model over `tokens`, appending to `cache`. Incremental calls on one cache are
/// equivalent to a single call on the concatenated tokens.
inline ForwardResult forward(const ModelBundle& b, std::span<const int> tokens, ModelCache& cache,
                             const ForwardOptions& opt = {}) {
    const auto contexts = make_contexts(cache.length(), tokens.size(), opt.tree);
    return forward_rows(b, tokens, cache, contexts, opt);
}

inline ForwardResult forward(const ModelBundle& b, std::span<const int> tokens, const ForwardOptions& opt = {}) {
    ModelCache cache(b.config, opt.attention.sparse.kernel_params());
    return forward(b, tokens, cache, opt);
}

} // namespace cpm4

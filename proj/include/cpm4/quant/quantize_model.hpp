// Copyright 2026 The cpm4kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cpm4/model.hpp"
#include "cpm4/quant/calibration.hpp"
#include "cpm4/quant/gptq.hpp"
#include "cpm4/quant/hessian.hpp"

namespace cpm4::quant {

struct QuantParams {
    std::size_t group_size = 128;
    int bits = 4;
    bool symmetric = false;
    std::size_t prefix_s = 4;  // 0 = full Hessian
    double damp = 0.01;

    /// Canonical mode name; a prefix of zero positions is the full Hessian.
    std::string mode() const { return prefix_s == 0 ? "full" : "prefix"; }
    GptqOptions gptq() const { return {group_size, bits, symmetric, damp}; }
    nlohmann::json to_json() const {
        return {{"mode", mode()}, {"s", prefix_s}, {"group_size", group_size}, {"bits", bits}, {"symmetric", symmetric}};
    }
};

/// Names of the weights the quantizer replaces: every linear of every transformer layer.
inline std::vector<std::string> quantizable_names(const ModelBundle& b) {
    std::vector<std::string> out;
    for (std::size_t l = 0; l < b.config.n_layers; ++l)
        for (const auto& n : layer_linear_names()) out.push_back(layer_prefix(l) + n);
    return out;
}

struct QuantizedModel {
    ModelBundle source;  // full-precision tensors; quantized ones are replaced on export
    std::map<std::string, QuantizedLinear> linears;
    QuantParams params;

    /// f32 bundle with every quantized weight dequantized.
    ModelBundle dequantized() const {
        ModelBundle b = source;
        for (const auto& [name, q] : linears) b.tensors[name] = dequantize(q);
        return b;
    }

    Container to_container() const {
        Container c = cpm4::to_container(source);
        for (const auto& [name, q] : linears) c.entries[name] = encode_entry(q);
        c.metadata["quant"] = params.to_json();
        return c;
    }

    void save(const std::filesystem::path& path) const { write_container(to_container(), path); }
};

/// GPTQ over every layer linear with a Hessian from the layer's own calibration inputs
/// (rows at positions >= prefix_s). The calibration set comes from the full-precision model.
inline QuantizedModel quantize_model(const ModelBundle& b, const CalibrationSet& cal, const QuantParams& p) {
    QuantizedModel qm;
    qm.source = b;
    qm.params = p;
    for (const auto& name : quantizable_names(b)) {
        const LayerActivations& a = cal.at(name);
        const HessianEstimate h = prefix_hessian(a.x, a.positions, p.prefix_s);
        qm.linears.emplace(name, gptq_quantize(b.tensor(name), h, p.gptq()));
    }
    return qm;
}

struct LayerEval {
    std::string name;
    double proxy_loss = 0.0;
};

struct QuantEval {
    std::vector<LayerEval> layers;
    double max_logit_drift = 0.0;
    double mean_logit_drift = 0.0;
};

/// Proxy loss per layer over calibration rows at positions >= min_pos and the logit drift of
/// the dequantized model against full precision on `eval`.
inline QuantEval quant_eval(const ModelBundle& fp, const QuantizedModel& qm, const CalibrationSet& cal,
                            std::span<const std::vector<int>> eval, std::size_t min_pos) {
    QuantEval e;
    for (const auto& [name, q] : qm.linears) {
        const LayerActivations& a = cal.at(name);
        e.layers.push_back({name, proxy_loss(a.x, a.positions, min_pos, fp.tensor(name), dequantize(q))});
    }
    const ModelBundle dq = qm.dequantized();
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& seq : eval) {
        const Tensor a = forward(fp, seq).logits;
        const Tensor b = forward(dq, seq).logits;
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double d = std::fabs(double(a[i]) - double(b[i]));
            e.max_logit_drift = std::max(e.max_logit_drift, d);
            sum += d;
            ++n;
        }
    }
    e.mean_logit_drift = n ? sum / double(n) : 0.0;
    return e;
}

} // namespace cpm4::quant

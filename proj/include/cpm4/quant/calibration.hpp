// Copyright 2026 The cpm4kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "cpm4/model.hpp"

namespace cpm4::quant {

/// Inputs seen by one linear layer: one row per token position, with the position of that
/// row inside its source sequence.
struct LayerActivations {
    Tensor x;
    std::vector<std::size_t> positions;
};

/// Per-layer activations keyed by weight name ("layers.0.wq", ...).
struct CalibrationSet {
    std::map<std::string, LayerActivations> layers;

    const LayerActivations& at(const std::string& name) const {
        auto it = layers.find(name);
        CPM4_REQUIRE(it != layers.end(), ValidationError, "no calibration data for \"" + name + "\"");
        return it->second;
    }
};

/// Runs the full-precision model over each sequence and records every linear layer's input.
inline CalibrationSet collect_calibration(const ModelBundle& b, std::span<const std::vector<int>> sequences) {
    CPM4_REQUIRE(!sequences.empty(), PreconditionError, "calibration needs at least one sequence");
    CalibrationSet cal;
    for (const auto& seq : sequences) {
        CPM4_REQUIRE(!seq.empty(), PreconditionError, "calibration sequences must be non-empty");
        ForwardOptions fo;
        fo.compute_logits = false;
        fo.tap = [&](const std::string& name, const Tensor& in, const Tensor&) {
            LayerActivations& a = cal.layers[name];
            if (a.x.rank() != 2) a.x = Tensor(0, in.cols());
            for (std::size_t i = 0; i < in.rows(); ++i) {
                a.x.push_row(in.row(i));
                a.positions.push_back(i);
            }
        };
        forward(b, seq, fo);
    }
    return cal;
}

} // namespace cpm4::quant

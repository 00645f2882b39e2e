// Copyright 2026 The cpm4kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "cpm4/container.hpp"
#include "cpm4/error.hpp"
#include "cpm4/tensor.hpp"

namespace cpm4::quant {

/// Per-group affine grid: value(code) = scale * (code - zero).
struct GroupGrid {
    float scale = 1.0f;
    float zero = 0.0f;
};

inline int max_code(int bits) { return (1 << bits) - 1; }

/// Min-max grid for one group of weights. Asymmetric grids span [min, max]; symmetric grids
/// span [-max|w|, max|w|] with the zero point at the middle code.
inline GroupGrid fit_grid(std::span<const float> w, int bits, bool symmetric) {
    const int maxq = max_code(bits);
    float lo = *std::min_element(w.begin(), w.end());
    float hi = *std::max_element(w.begin(), w.end());
    GroupGrid g;
    if (symmetric) {
        const float amax = std::max(std::fabs(lo), std::fabs(hi));
        g.scale = amax > 0.0f ? 2.0f * amax / static_cast<float>(maxq) : 1.0f;
        g.zero = static_cast<float>((maxq + 1) / 2);
        return g;
    }
    if (hi == lo) {
        // Constant group: a unit step anchored at the value reproduces it exactly.
        g.scale = lo != 0.0f ? std::fabs(lo) : 1.0f;
        g.zero = std::round(-lo / g.scale);
        return g;
    }
    g.scale = (hi - lo) / static_cast<float>(maxq);
    g.zero = std::round(-lo / g.scale);
    return g;
}

inline std::uint8_t quantize_value(float w, const GroupGrid& g, int bits) {
    const float q = std::round(w / g.scale) + g.zero;
    return static_cast<std::uint8_t>(std::clamp(q, 0.0f, static_cast<float>(max_code(bits))));
}

inline float dequantize_value(std::uint8_t code, const GroupGrid& g) {
    return g.scale * (static_cast<float>(code) - g.zero);
}

/// Weight-only quantized linear layer: per-row groups of `group_size` consecutive input weights.
struct QuantizedLinear {
    std::size_t out_features = 0;
    std::size_t in_features = 0;
    std::size_t group_size = 128;
    int bits = 4;
    bool symmetric = false;
    std::vector<std::uint8_t> codes;  // out_features * in_features, row-major
    std::vector<float> scales;        // out_features * n_groups()
    std::vector<float> zeros;         // out_features * n_groups()

    std::size_t n_groups() const noexcept { return (in_features + group_size - 1) / group_size; }
    GroupGrid grid(std::size_t row, std::size_t col) const noexcept {
        const std::size_t idx = row * n_groups() + col / group_size;
        return {scales[idx], zeros[idx]};
    }
    std::uint8_t code(std::size_t row, std::size_t col) const noexcept { return codes[row * in_features + col]; }

    void validate() const {
        CPM4_REQUIRE(bits == 4 || bits == 8, ValidationError, "only 4- and 8-bit codes are supported");
        CPM4_REQUIRE(group_size > 0, ValidationError, "group size must be positive");
        CPM4_REQUIRE(codes.size() == out_features * in_features, ValidationError, "code count does not match shape");
        CPM4_REQUIRE(scales.size() == out_features * n_groups() && zeros.size() == scales.size(), ValidationError,
                     "scale/zero count does not match groups");
        const int maxq = max_code(bits);
        CPM4_REQUIRE(std::all_of(codes.begin(), codes.end(), [&](std::uint8_t c) { return c <= maxq; }), ValidationError,
                     "code outside the quantization range");
    }
};

inline Tensor dequantize(const QuantizedLinear& q) {
    Tensor w(q.out_features, q.in_features);
    for (std::size_t r = 0; r < q.out_features; ++r)
        for (std::size_t c = 0; c < q.in_features; ++c) w(r, c) = dequantize_value(q.code(r, c), q.grid(r, c));
    return w;
}

/// Plain round-to-nearest quantization on the min-max grid of each group.
inline QuantizedLinear quantize_rtn(const Tensor& w, std::size_t group_size, int bits = 4, bool symmetric = false) {
    QuantizedLinear q;
    q.out_features = w.rows();
    q.in_features = w.cols();
    q.group_size = group_size;
    q.bits = bits;
    q.symmetric = symmetric;
    q.codes.resize(w.size());
    q.scales.resize(q.out_features * q.n_groups());
    q.zeros.resize(q.scales.size());
    for (std::size_t r = 0; r < q.out_features; ++r) {
        for (std::size_t gi = 0; gi < q.n_groups(); ++gi) {
            const std::size_t c0 = gi * group_size, c1 = std::min(c0 + group_size, q.in_features);
            const GroupGrid g = fit_grid(w.row(r).subspan(c0, c1 - c0), bits, symmetric);
            q.scales[r * q.n_groups() + gi] = g.scale;
            q.zeros[r * q.n_groups() + gi] = g.zero;
            for (std::size_t c = c0; c < c1; ++c) q.codes[r * q.in_features + c] = quantize_value(w(r, c), g, bits);
        }
    }
    return q;
}

/// Container entry for a quantized tensor: dtype "q4g" packs two codes per byte (low nibble
/// first) within each group, "q8g" stores one byte per code; both are followed by the f32
/// scales and then the f32 zeros.
inline ContainerEntry encode_entry(const QuantizedLinear& q) {
    q.validate();
    ContainerEntry e;
    e.dtype = q.bits == 4 ? "q4g" : "q8g";
    e.shape = {q.out_features, q.in_features};
    std::vector<std::uint8_t>& b = e.bytes;
    for (std::size_t r = 0; r < q.out_features; ++r) {
        for (std::size_t gi = 0; gi < q.n_groups(); ++gi) {
            const std::size_t c0 = gi * q.group_size, c1 = std::min(c0 + q.group_size, q.in_features);
            if (q.bits == 8) {
                for (std::size_t c = c0; c < c1; ++c) b.push_back(q.code(r, c));
                continue;
            }
            for (std::size_t c = c0; c < c1; c += 2) {
                std::uint8_t byte = q.code(r, c) & 0x0F;
                if (c + 1 < c1) byte |= static_cast<std::uint8_t>((q.code(r, c + 1) & 0x0F) << 4);
                b.push_back(byte);
            }
        }
    }
    const std::size_t code_bytes = b.size();
    const auto append_floats = [&](const std::vector<float>& v) {
        const std::size_t at = b.size();
        b.resize(at + v.size() * sizeof(float));
        if (!v.empty()) std::memcpy(b.data() + at, v.data(), v.size() * sizeof(float));
    };
    append_floats(q.scales);
    append_floats(q.zeros);
    e.extra = {{"group_size", q.group_size}, {"bits", q.bits}, {"symmetric", q.symmetric}, {"codes_length", code_bytes}};
    return e;
}

inline QuantizedLinear decode_entry(const ContainerEntry& e, const std::string& name) {
    CPM4_REQUIRE(e.dtype == "q4g" || e.dtype == "q8g", FormatError, "tensor \"" + name + "\" is not quantized");
    CPM4_REQUIRE(e.shape.size() == 2, ValidationError, "quantized tensor \"" + name + "\" must be rank 2");
    QuantizedLinear q;
    try {
        q.group_size = e.extra.at("group_size").get<std::size_t>();
        q.symmetric = e.extra.value("symmetric", false);
    } catch (const nlohmann::json::exception&) {
        throw FormatError("quantized tensor \"" + name + "\" lacks group_size");
    }
    CPM4_REQUIRE(q.group_size > 0, FormatError, "quantized tensor \"" + name + "\" has zero group size");
    q.bits = e.dtype == "q4g" ? 4 : 8;
    q.out_features = e.shape[0];
    q.in_features = e.shape[1];
    const std::size_t groups = q.n_groups();
    std::size_t code_bytes = 0;
    for (std::size_t gi = 0; gi < groups; ++gi) {
        const std::size_t len = std::min(q.group_size, q.in_features - gi * q.group_size);
        code_bytes += q.bits == 4 ? (len + 1) / 2 : len;
    }
    code_bytes *= q.out_features;
    const std::size_t nscale = q.out_features * groups;
    CPM4_REQUIRE(e.bytes.size() == code_bytes + 2 * nscale * sizeof(float), ValidationError,
                 "quantized tensor \"" + name + "\" byte length does not match shape");
    q.codes.resize(q.out_features * q.in_features);
    std::size_t at = 0;
    for (std::size_t r = 0; r < q.out_features; ++r) {
        for (std::size_t gi = 0; gi < groups; ++gi) {
            const std::size_t c0 = gi * q.group_size, c1 = std::min(c0 + q.group_size, q.in_features);
            if (q.bits == 8) {
                for (std::size_t c = c0; c < c1; ++c) q.codes[r * q.in_features + c] = e.bytes[at++];
                continue;
            }
            for (std::size_t c = c0; c < c1; c += 2) {
                const std::uint8_t byte = e.bytes[at++];
                q.codes[r * q.in_features + c] = byte & 0x0F;
                if (c + 1 < c1) q.codes[r * q.in_features + c + 1] = byte >> 4;
            }
        }
    }
    q.scales.resize(nscale);
    q.zeros.resize(nscale);
    std::memcpy(q.scales.data(), e.bytes.data() + at, nscale * sizeof(float));
    std::memcpy(q.zeros.data(), e.bytes.data() + at + nscale * sizeof(float), nscale * sizeof(float));
    q.validate();
    return q;
}

} // namespace cpm4::quant

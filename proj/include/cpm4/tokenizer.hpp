// Copyright 2026 The cpm4kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace cpm4 {

/// Byte-level tokenizer: ids 0..255 are raw bytes, followed by three specials.
struct ByteTokenizer {
    static constexpr int kBos = 256;
    static constexpr int kEos = 257;
    static constexpr int kPad = 258;
    static constexpr std::size_t kVocabSize = 259;

    static std::vector<int> specials() { return {kBos, kEos, kPad}; }

    static std::vector<int> encode(std::string_view text, bool bos = true) {
        std::vector<int> ids;
        ids.reserve(text.size() + 1);
        if (bos) ids.push_back(kBos);
        for (unsigned char c : text) ids.push_back(c);
        return ids;
    }

    /// Specials are dropped.
    static std::string decode(const std::vector<int>& ids) {
        std::string s;
        for (int t : ids)
            if (t >= 0 && t < 256) s.push_back(static_cast<char>(t));
        return s;
    }
};

} // namespace cpm4

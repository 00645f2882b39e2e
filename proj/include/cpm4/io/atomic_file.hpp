// Copyright 2026 The cpm4kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <system_error>

#include "cpm4/error.hpp"

namespace cpm4::io {

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string() + " for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Writes to a sibling temporary and renames it over the target, so readers never
// observe a partially written file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        out.flush();
        if (!out) {
            std::error_code ec;
            std::filesystem::remove(tmp, ec);
            throw IoError("write failed for " + tmp.string());
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw IoError("cannot move " + tmp.string() + " to " + path.string());
    }
}

} // namespace cpm4::io

// Copyright 2026 The cpm4kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// "CPM4" weight container.
//
//   bytes 0..3   magic "CPM4"
//   bytes 4..7   version, u32 little-endian (1)
//   bytes 8..15  header length H, u64 little-endian
//   H bytes      UTF-8 JSON: name -> {dtype, shape, offset, length, ...}
//   data         raw little-endian payloads; offsets are relative to the end
//                of the header and 64-byte aligned
//
// The optional "__metadata__" header key carries model config and flags.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpm4/error.hpp"
#include "cpm4/io/atomic_file.hpp"
#include "cpm4/tensor.hpp"

namespace cpm4 {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

inline constexpr char kContainerMagic[4] = {'C', 'P', 'M', '4'};
inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr std::size_t kContainerAlign = 64;
inline constexpr const char* kMetadataKey = "__metadata__";

struct ContainerEntry {
    std::string dtype;                 // "f32", "q4g", "q8g"
    std::vector<std::size_t> shape;
    std::vector<std::uint8_t> bytes;
    nlohmann::json extra = nlohmann::json::object();  // dtype-specific header fields
};

struct Container {
    nlohmann::json metadata = nlohmann::json::object();
    std::map<std::string, ContainerEntry> entries;

    void put_f32(const std::string& name, const Tensor& t) {
        CPM4_REQUIRE(!name.empty(), ValidationError, "empty tensor name");
        ContainerEntry e;
        e.dtype = "f32";
        e.shape = t.shape();
        e.bytes.resize(t.size() * sizeof(float));
        if (!e.bytes.empty()) std::memcpy(e.bytes.data(), t.data(), e.bytes.size());
        entries[name] = std::move(e);
    }

    Tensor get_f32(const std::string& name) const {
        auto it = entries.find(name);
        CPM4_REQUIRE(it != entries.end(), ValidationError, "missing tensor \"" + name + "\"");
        const ContainerEntry& e = it->second;
        CPM4_REQUIRE(e.dtype == "f32", ValidationError, "tensor \"" + name + "\" is not f32");
        CPM4_REQUIRE(e.shape.size() == 1 || e.shape.size() == 2, ValidationError,
                     "tensor \"" + name + "\" has unsupported rank");
        const std::size_t n = Tensor::numel_of(e.shape);
        CPM4_REQUIRE(e.bytes.size() == n * sizeof(float), ValidationError,
                     "tensor \"" + name + "\" byte length does not match shape");
        std::vector<float> data(n);
        if (n) std::memcpy(data.data(), e.bytes.data(), e.bytes.size());
        return Tensor(e.shape, std::move(data));
    }
};

inline std::string serialize_container(const Container& c) {
    nlohmann::json header = nlohmann::json::object();
    std::size_t offset = 0;
    for (const auto& [name, e] : c.entries) {
        CPM4_REQUIRE(!name.empty(), ValidationError, "empty tensor name");
        CPM4_REQUIRE(name != kMetadataKey, ValidationError, "reserved tensor name");
        offset = (offset + kContainerAlign - 1) / kContainerAlign * kContainerAlign;
        nlohmann::json j = e.extra;
        j["dtype"] = e.dtype;
        j["shape"] = e.shape;
        j["offset"] = offset;
        j["length"] = e.bytes.size();
        header[name] = std::move(j);
        offset += e.bytes.size();
    }
    if (!c.metadata.empty()) header[kMetadataKey] = c.metadata;
    const std::string hdr = header.dump();

    std::string out;
    out.append(kContainerMagic, 4);
    const std::uint32_t version = kContainerVersion;
    out.append(reinterpret_cast<const char*>(&version), 4);
    const std::uint64_t hlen = hdr.size();
    out.append(reinterpret_cast<const char*>(&hlen), 8);
    out += hdr;
    const std::size_t data_begin = out.size();
    for (const auto& [name, e] : c.entries) {
        const std::size_t at = header[name]["offset"].get<std::size_t>();
        out.resize(data_begin + at, '\0');
        out.append(reinterpret_cast<const char*>(e.bytes.data()), e.bytes.size());
    }
    return out;
}

inline Container parse_container(const std::string& blob) {
    CPM4_REQUIRE(blob.size() >= 16 && std::memcmp(blob.data(), kContainerMagic, 4) == 0, FormatError,
                 "not a CPM4 container (bad magic)");
    std::uint32_t version = 0;
    std::memcpy(&version, blob.data() + 4, 4);
    CPM4_REQUIRE(version == kContainerVersion, FormatError,
                 "unsupported CPM4 container version " + std::to_string(version));
    std::uint64_t hlen = 0;
    std::memcpy(&hlen, blob.data() + 8, 8);
    CPM4_REQUIRE(hlen <= blob.size() - 16, FormatError, "CPM4 header length exceeds file size");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(blob.begin() + 16, blob.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("CPM4 header is not valid JSON: ") + e.what());
    }
    CPM4_REQUIRE(header.is_object(), FormatError, "CPM4 header must be a JSON object");

    Container c;
    const std::size_t data_begin = 16 + hlen;
    for (auto it = header.begin(); it != header.end(); ++it) {
        if (it.key() == kMetadataKey) {
            c.metadata = it.value();
            continue;
        }
        const nlohmann::json& j = it.value();
        ContainerEntry e;
        try {
            e.dtype = j.at("dtype").get<std::string>();
            e.shape = j.at("shape").get<std::vector<std::size_t>>();
            const auto offset = j.at("offset").get<std::size_t>();
            const auto length = j.at("length").get<std::size_t>();
            CPM4_REQUIRE(offset % kContainerAlign == 0, FormatError,
                         "tensor \"" + it.key() + "\" offset is not 64-byte aligned");
            CPM4_REQUIRE(data_begin + offset + length <= blob.size(), FormatError,
                         "tensor \"" + it.key() + "\" extends past end of file");
            e.bytes.assign(blob.begin() + static_cast<std::ptrdiff_t>(data_begin + offset),
                           blob.begin() + static_cast<std::ptrdiff_t>(data_begin + offset + length));
        } catch (const nlohmann::json::exception& ex) {
            throw FormatError("tensor \"" + it.key() + "\" has a malformed header entry: " + ex.what());
        }
        for (auto f = j.begin(); f != j.end(); ++f) {
            if (f.key() != "dtype" && f.key() != "shape" && f.key() != "offset" && f.key() != "length")
                e.extra[f.key()] = f.value();
        }
        c.entries.emplace(it.key(), std::move(e));
    }
    return c;
}

inline void write_container(const Container& c, const std::filesystem::path& path) {
    io::write_file_atomic(path, serialize_container(c));
}

inline Container read_container(const std::filesystem::path& path) {
    return parse_container(io::read_file(path));
}

} // namespace cpm4

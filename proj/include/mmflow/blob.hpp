// Copyright (C) 2026 The mmflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Raw tensor files: 16-byte magic "UVXTENS1" (zero padded), u32 rank,
// u32 dims[rank], then float32 payload, all little-endian.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mmflow/tensor.hpp"

namespace mmflow {

namespace le {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
    }
}

inline std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

inline float get_f32(const unsigned char* p) { return std::bit_cast<float>(get_u32(p)); }

}  // namespace le

inline constexpr std::array<char, 16> kBlobMagic{'U', 'V', 'X', 'T', 'E', 'N', 'S', '1'};

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    MMFLOW_CHECK(f.good(), ErrorCode::kIo, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    MMFLOW_CHECK(f.good(), ErrorCode::kIo, "cannot write " + path.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    MMFLOW_CHECK(f.good(), ErrorCode::kIo, "short write to " + path.string());
}

inline std::string encode_blob(const Tensor<float>& t) {
    std::string out(kBlobMagic.begin(), kBlobMagic.end());
    le::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) {
        le::put_u32(out, static_cast<std::uint32_t>(d));
    }
    for (float v : t.values()) {
        le::put_f32(out, v);
    }
    return out;
}

inline Tensor<float> decode_blob(const std::string& bytes) {
    MMFLOW_CHECK(bytes.size() >= 20 && std::memcmp(bytes.data(), kBlobMagic.data(), kBlobMagic.size()) == 0,
                 ErrorCode::kIo, "not a tensor blob");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::uint32_t rank = le::get_u32(p + 16);
    std::size_t off = 20;
    MMFLOW_CHECK(rank >= 1 && rank <= 8 && bytes.size() >= off + 4 * rank, ErrorCode::kIo, "bad blob header");
    Shape shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i, off += 4) {
        shape[i] = le::get_u32(p + off);
        MMFLOW_CHECK(shape[i] > 0, ErrorCode::kIo, "zero dim in blob");
    }
    const std::size_t n = shape_numel(shape);
    MMFLOW_CHECK(bytes.size() == off + 4 * n, ErrorCode::kIo, "blob payload size mismatch");
    std::vector<float> data(n);
    for (std::size_t i = 0; i < n; ++i, off += 4) {
        data[i] = le::get_f32(p + off);
    }
    return Tensor<float>(std::move(shape), std::move(data));
}

inline void write_blob(const std::filesystem::path& path, const Tensor<float>& t) { write_file(path, encode_blob(t)); }

inline Tensor<float> read_blob(const std::filesystem::path& path) { return decode_blob(read_file(path)); }

}  // namespace mmflow

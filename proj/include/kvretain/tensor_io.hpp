// Copyright (C) 2026 The kvretain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Tensor files carry either scores (rank 1, shape [n]) or value blocks
// (rank 4, shape [n, L, H, d]). Two encodings are accepted:
//
// Binary, little-endian:
//   bytes 0..3   magic "KVRT"
//   byte  4      format version (1)
//   byte  5      dtype: 1 = float32, 2 = float64
//   byte  6      rank (1..4)
//   byte  7      reserved, zero
//   then rank x uint64 dimensions, then the row-major payload.
//
// JSON:
//   {"dtype": "float32" | "float64", "shape": [...], "data": [...]}
// A bare JSON array of numbers is read as a float64 rank-1 tensor.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kvretain/error.hpp"
#include "kvretain/retention_core.hpp"

namespace kvretain {

static_assert(std::endian::native == std::endian::little, "tensor IO assumes a little-endian host");

enum class DType : std::uint8_t { Float32 = 1, Float64 = 2 };

inline const char* dtype_name(DType t) { return t == DType::Float32 ? "float32" : "float64"; }

struct Tensor {
    DType dtype = DType::Float64;
    std::vector<std::uint64_t> shape;
    std::vector<double> data;

    std::uint64_t element_count() const {
        std::uint64_t count = 1;
        for (auto d : shape) {
            count *= d;
        }
        return count;
    }
    bool operator==(const Tensor&) const = default;
};

inline constexpr char kTensorMagic[4] = {'K', 'V', 'R', 'T'};
inline constexpr std::uint8_t kTensorFormatVersion = 1;

namespace detail {

template <typename T>
void append_raw(std::string& out, const T& value) {
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.append(buf, sizeof(T));
}

template <typename T>
T read_raw(const std::string& in, std::size_t& pos) {
    if (pos + sizeof(T) > in.size()) {
        throw SchemaError("tensor file truncated at byte " + std::to_string(pos));
    }
    T value;
    std::memcpy(&value, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return value;
}

inline DType parse_dtype(const std::string& name) {
    if (name == "float32" || name == "f32") {
        return DType::Float32;
    }
    if (name == "float64" || name == "f64") {
        return DType::Float64;
    }
    throw SchemaError("unknown tensor dtype '" + name + "'");
}

inline void check_tensor(const Tensor& t) {
    if (t.shape.empty() || t.shape.size() > 4) {
        throw SchemaError("tensor rank must be between 1 and 4");
    }
    if (t.data.size() != t.element_count()) {
        throw SchemaError("tensor payload has " + std::to_string(t.data.size()) +
                          " elements but shape implies " + std::to_string(t.element_count()));
    }
}

} // namespace detail

inline std::string encode_tensor_binary(const Tensor& t) {
    detail::check_tensor(t);
    std::string out(kTensorMagic, 4);
    out.push_back(static_cast<char>(kTensorFormatVersion));
    out.push_back(static_cast<char>(t.dtype));
    out.push_back(static_cast<char>(t.shape.size()));
    out.push_back('\0');
    for (auto d : t.shape) {
        detail::append_raw(out, d);
    }
    out.reserve(out.size() + t.data.size() * (t.dtype == DType::Float32 ? 4 : 8));
    for (double v : t.data) {
        if (t.dtype == DType::Float32) {
            detail::append_raw(out, static_cast<float>(v));
        } else {
            detail::append_raw(out, v);
        }
    }
    return out;
}

inline bool looks_binary_tensor(const std::string& bytes) {
    return bytes.size() >= 4 && std::memcmp(bytes.data(), kTensorMagic, 4) == 0;
}

inline Tensor decode_tensor_binary(const std::string& bytes) {
    if (!looks_binary_tensor(bytes)) {
        throw SchemaError("missing KVRT magic");
    }
    std::size_t pos = 4;
    const auto version = detail::read_raw<std::uint8_t>(bytes, pos);
    if (version != kTensorFormatVersion) {
        throw SchemaError("unsupported tensor format version " + std::to_string(version));
    }
    const auto dtype = detail::read_raw<std::uint8_t>(bytes, pos);
    if (dtype != 1 && dtype != 2) {
        throw SchemaError("unknown tensor dtype code " + std::to_string(dtype));
    }
    const auto rank = detail::read_raw<std::uint8_t>(bytes, pos);
    detail::read_raw<std::uint8_t>(bytes, pos);

    Tensor t;
    t.dtype = static_cast<DType>(dtype);
    for (std::uint8_t r = 0; r < rank; ++r) {
        t.shape.push_back(detail::read_raw<std::uint64_t>(bytes, pos));
    }
    if (t.shape.empty() || t.shape.size() > 4) {
        throw SchemaError("tensor rank must be between 1 and 4");
    }
    const std::uint64_t count = t.element_count();
    const std::size_t width = t.dtype == DType::Float32 ? 4 : 8;
    if (bytes.size() - pos != count * width) {
        throw SchemaError("tensor payload is " + std::to_string(bytes.size() - pos) +
                          " bytes, expected " + std::to_string(count * width));
    }
    t.data.resize(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        t.data[i] = t.dtype == DType::Float32 ? detail::read_raw<float>(bytes, pos)
                                              : detail::read_raw<double>(bytes, pos);
    }
    return t;
}

inline nlohmann::json tensor_to_json(const Tensor& t) {
    detail::check_tensor(t);
    nlohmann::json j;
    j["dtype"] = dtype_name(t.dtype);
    j["shape"] = t.shape;
    if (t.dtype == DType::Float32) {
        std::vector<float> narrow(t.data.begin(), t.data.end());
        j["data"] = narrow;
    } else {
        j["data"] = t.data;
    }
    return j;
}

inline Tensor tensor_from_json(const nlohmann::json& j) {
    Tensor t;
    try {
        if (j.is_array()) {
            t.shape = {j.size()};
            t.data = j.get<std::vector<double>>();
        } else {
            t.dtype = detail::parse_dtype(j.at("dtype").get<std::string>());
            t.shape = j.at("shape").get<std::vector<std::uint64_t>>();
            t.data = j.at("data").get<std::vector<double>>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("malformed tensor JSON: ") + e.what());
    }
    if (t.dtype == DType::Float32) {
        for (double& v : t.data) {
            v = static_cast<float>(v);
        }
    }
    detail::check_tensor(t);
    return t;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open '" + path.string() + "' for reading");
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    if (in.bad()) {
        throw IoError("read failed on '" + path.string() + "'");
    }
    return buf.str();
}

/// Reads either encoding, detected by the magic bytes.
inline Tensor load_tensor(const std::filesystem::path& path) {
    const std::string bytes = read_file_bytes(path);
    if (looks_binary_tensor(bytes)) {
        return decode_tensor_binary(bytes);
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(bytes);
    } catch (const nlohmann::json::parse_error& e) {
        throw SchemaError("'" + path.string() + "' is neither a KVRT tensor nor JSON: " + e.what());
    }
    return tensor_from_json(j);
}

inline std::vector<double> tensor_to_scores(const Tensor& t) {
    if (t.shape.size() != 1) {
        throw SchemaError("score tensor must have rank 1, got rank " + std::to_string(t.shape.size()));
    }
    return t.data;
}

inline ValueTensorBlock<double> tensor_to_value_block(const Tensor& t) {
    if (t.shape.size() != 4) {
        throw SchemaError("value tensor must have shape [n, L, H, d], got rank " +
                          std::to_string(t.shape.size()));
    }
    ValueTensorBlock<double> block;
    block.tokens = t.shape[0];
    block.layers = t.shape[1];
    block.heads = t.shape[2];
    block.head_dim = t.shape[3];
    block.values = t.data;
    return block;
}

template <typename T>
Tensor value_block_to_tensor(const ValueTensorBlock<T>& block, DType dtype = DType::Float32) {
    Tensor t;
    t.dtype = dtype;
    t.shape = {block.tokens, block.layers, block.heads, block.head_dim};
    t.data.assign(block.values.begin(), block.values.end());
    return t;
}

} // namespace kvretain

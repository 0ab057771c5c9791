// Copyright (C) 2026 The kvretain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "kvretain/error.hpp"

namespace kvretain {

using Md5Digest = std::array<std::uint8_t, 16>;

inline Md5Digest md5(std::string_view bytes) {
    Md5Digest out{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), out.data(), &len, EVP_md5(), nullptr) != 1 ||
        len != out.size()) {
        throw Error(ErrorKind::Internal, "MD5 digest failed");
    }
    return out;
}

inline std::string to_hex(const Md5Digest& digest) {
    static constexpr char kHex[] = "0123456789abcdef";
    std::string s;
    s.reserve(32);
    for (auto b : digest) {
        s.push_back(kHex[b >> 4]);
        s.push_back(kHex[b & 0xf]);
    }
    return s;
}

/// Digest-to-bucket rule: the 16 digest bytes read as one big-endian
/// unsigned 128-bit integer, reduced mod 5. Same value as int(hexdigest, 16) % 5.
inline constexpr std::string_view kSplitConvention = "md5-be128-mod5/v1";
inline constexpr int kSplitBuckets = 5;

inline int bucket(std::string_view id) {
    KVRETAIN_CHECK(!id.empty(), "problem id must be non-empty");
    unsigned rem = 0;
    for (auto byte : md5(id)) {
        rem = (rem * 256u + byte) % kSplitBuckets;
    }
    return static_cast<int>(rem);
}

inline bool is_dev_bucket(int b) { return b == 0 || b == 1; }

struct SplitManifest {
    std::string convention{kSplitConvention};
    std::string input_set_md5;
    std::vector<std::string> dev_ids;
    std::vector<std::string> confirm_ids;
    std::map<std::string, int> bucket_of;

    nlohmann::json to_json() const {
        return {
            {"schema", "kvretain.split/1"},
            {"convention", convention},
            {"input_set_md5", input_set_md5},
            {"counts", {{"dev", dev_ids.size()}, {"confirm", confirm_ids.size()}}},
            {"dev_ids", dev_ids},
            {"confirm_ids", confirm_ids},
            {"bucket_of", bucket_of},
        };
    }

    static SplitManifest from_json(const nlohmann::json& j) {
        SplitManifest m;
        try {
            m.convention = j.at("convention").get<std::string>();
            m.input_set_md5 = j.at("input_set_md5").get<std::string>();
            m.dev_ids = j.at("dev_ids").get<std::vector<std::string>>();
            m.confirm_ids = j.at("confirm_ids").get<std::vector<std::string>>();
            m.bucket_of = j.at("bucket_of").get<std::map<std::string, int>>();
        } catch (const nlohmann::json::exception& e) {
            throw SchemaError(std::string("malformed split manifest: ") + e.what());
        }
        if (m.convention != kSplitConvention) {
            throw SchemaError("split manifest uses convention '" + m.convention + "', expected '" +
                              std::string(kSplitConvention) + "'");
        }
        return m;
    }
};

/// MD5 of the sorted ids joined by '\n'; identifies the input set.
inline std::string input_set_digest(std::vector<std::string> ids) {
    std::sort(ids.begin(), ids.end());
    std::string joined;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) {
            joined.push_back('\n');
        }
        joined += ids[i];
    }
    return to_hex(md5(joined));
}

/// Buckets {0,1} go to dev, {2,3,4} to confirm. Id lists come back sorted.
inline SplitManifest build_manifest(std::span<const std::string> ids) {
    std::vector<std::string> sorted(ids.begin(), ids.end());
    std::sort(sorted.begin(), sorted.end());
    std::vector<std::string> dups;
    for (std::size_t i = 1; i < sorted.size(); ++i) {
        if (sorted[i] == sorted[i - 1] && (dups.empty() || dups.back() != sorted[i])) {
            dups.push_back(sorted[i]);
        }
    }
    if (!dups.empty()) {
        std::string msg = "duplicate problem ids:";
        for (const auto& d : dups) {
            msg += " " + d;
        }
        throw ValidationError(msg);
    }

    SplitManifest m;
    m.input_set_md5 = input_set_digest(sorted);
    for (const auto& id : sorted) {
        const int b = bucket(id);
        m.bucket_of.emplace(id, b);
        (is_dev_bucket(b) ? m.dev_ids : m.confirm_ids).push_back(id);
    }
    return m;
}

/// One id per line; trailing '\r' is stripped and blank lines are skipped.
inline std::vector<std::string> read_id_list(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open '" + path.string() + "' for reading");
    }
    std::vector<std::string> ids;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (!line.empty()) {
            ids.push_back(line);
        }
    }
    return ids;
}

} // namespace kvretain

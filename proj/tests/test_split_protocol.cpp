// Copyright (C) 2026 The kvretain Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "kvretain/rng.hpp"
#include "kvretain/split_protocol.hpp"

using namespace kvretain;

namespace {

// Digests and buckets computed once with Python's hashlib and int(hex, 16) % 5.
struct Golden {
    const char* id;
    const char* md5_hex;
    int bucket;
};

constexpr Golden kGolden[] = {
    {"test/algebra/1.json", "1f157d7497550df630c2e93ecd9d0c51", 0},
    {"test/precalculus/807.json", "81c33d99c87b4a0eaac99652fc596407", 0},
    {"test/number_theory/572.json", "a8c4701353b23b64a509d06ee563a68a", 4},
    {"test/geometry/1140.json", "db0bf02c41e938d468a829b4cd61b22e", 4},
    {"test/algebra/3.json", "6dba6798ecfbf1491dc1f6410a417b74", 3},
    {"test/algebra/11.json", "b8999ac19659d05e82542c02ddcc2216", 1},
    {"a", "0cc175b9c0f1b6a831c399e269772661", 2},
    {"\xc3\xa9", "66ddcd97cfdeabb2f6fb8a999b4bc76f", 0},
};

std::vector<std::string> synthetic_ids(std::size_t n, const std::string& prefix = "test/synthetic/") {
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < n; ++i) {
        ids.push_back(prefix + std::to_string(i) + ".json");
    }
    return ids;
}

} // namespace

TEST(Bucket, MatchesIndependentMd5) {
    for (const auto& g : kGolden) {
        EXPECT_EQ(to_hex(md5(g.id)), g.md5_hex) << g.id;
        EXPECT_EQ(bucket(g.id), g.bucket) << g.id;
    }
}

TEST(Bucket, DeterministicAndRejectsEmpty) {
    EXPECT_EQ(bucket("test/algebra/1.json"), bucket(std::string("test/algebra/1.json")));
    EXPECT_THROW(bucket(""), ValidationError);
}

TEST(BuildManifest, PartitionsAnyIdList) {
    SplitMix64 rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        auto ids = synthetic_ids(uniform_below(rng, 300), "p" + std::to_string(trial) + "/");
        const auto m = build_manifest(ids);
        EXPECT_EQ(m.dev_ids.size() + m.confirm_ids.size(), ids.size());
        std::set<std::string> dev(m.dev_ids.begin(), m.dev_ids.end());
        for (const auto& id : m.confirm_ids) {
            EXPECT_FALSE(dev.count(id));
            EXPECT_GE(m.bucket_of.at(id), 2);
        }
        for (const auto& id : m.dev_ids) {
            EXPECT_LE(m.bucket_of.at(id), 1);
        }
        EXPECT_TRUE(std::is_sorted(m.dev_ids.begin(), m.dev_ids.end()));
        EXPECT_TRUE(std::is_sorted(m.confirm_ids.begin(), m.confirm_ids.end()));
    }
}

TEST(BuildManifest, FiveHundredIds) {
    const auto m = build_manifest(synthetic_ids(500));
    EXPECT_EQ(m.dev_ids.size() + m.confirm_ids.size(), 500u);
    EXPECT_EQ(m.bucket_of.size(), 500u);
}

TEST(BuildManifest, EmptyList) {
    const auto m = build_manifest(std::vector<std::string>{});
    EXPECT_TRUE(m.dev_ids.empty());
    EXPECT_TRUE(m.confirm_ids.empty());
    EXPECT_EQ(m.convention, kSplitConvention);
}

TEST(BuildManifest, DuplicatesListed) {
    const std::vector<std::string> ids = {"x", "y", "x", "z", "y"};
    try {
        build_manifest(ids);
        FAIL();
    } catch (const ValidationError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find(" x"), std::string::npos);
        EXPECT_NE(msg.find(" y"), std::string::npos);
        EXPECT_EQ(msg.find(" z"), std::string::npos);
    }
}

TEST(BuildManifest, StableUnderInsertion) {
    auto ids = synthetic_ids(200);
    const auto before = build_manifest(ids);
    ids.push_back("test/new/9999.json");
    std::rotate(ids.begin(), ids.begin() + 50, ids.end());
    const auto after = build_manifest(ids);
    for (const auto& [id, b] : before.bucket_of) {
        EXPECT_EQ(after.bucket_of.at(id), b);
    }
    EXPECT_NE(before.input_set_md5, after.input_set_md5);
}

TEST(BuildManifest, OrderIndependentAndSerializable) {
    auto ids = synthetic_ids(64);
    const auto a = build_manifest(ids);
    std::reverse(ids.begin(), ids.end());
    const auto b = build_manifest(ids);
    EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
    const auto back = SplitManifest::from_json(a.to_json());
    EXPECT_EQ(back.dev_ids, a.dev_ids);
    EXPECT_EQ(back.bucket_of, a.bucket_of);
    auto j = a.to_json();
    j["convention"] = "something-else";
    EXPECT_THROW(SplitManifest::from_json(j), SchemaError);
}

// Chi-square sanity check of bucket uniformity; the bound is loose (p ~ 1e-6).
TEST(Bucket, RoughlyUniform) {
    std::array<int, 5> counts{};
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        ++counts[bucket("id-" + std::to_string(i))];
    }
    double chi2 = 0.0;
    for (int c : counts) {
        const double e = n / 5.0;
        chi2 += (c - e) * (c - e) / e;
    }
    EXPECT_LT(chi2, 33.0);
}

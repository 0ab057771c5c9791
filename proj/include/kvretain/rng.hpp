// Copyright (C) 2026 The kvretain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <limits>

namespace kvretain {

// SplitMix64 (Steele, Lea & Flood; constants as in Vigna's reference code).
// Every bit of output is defined by integer arithmetic, so streams reproduce
// exactly on any platform and compiler.

constexpr std::uint64_t kGoldenGamma = 0x9E3779B97F4A7C15ull;

constexpr std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

class SplitMix64 {
public:
    using result_type = std::uint64_t;

    constexpr explicit SplitMix64(std::uint64_t seed = 0) : m_state(seed) {}

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

    constexpr result_type operator()() {
        m_state += kGoldenGamma;
        return mix64(m_state);
    }

    /// Independent stream for the index-th unit of work under a run seed.
    static constexpr SplitMix64 substream(std::uint64_t seed, std::uint64_t index) {
        return SplitMix64(mix64(seed) ^ mix64(index * kGoldenGamma + 0x632BE59BD9B4E019ull));
    }

private:
    std::uint64_t m_state;
};

/// Unbiased integer in [0, bound) by multiply-shift with rejection (Lemire).
template <typename Rng>
std::uint64_t uniform_below(Rng& rng, std::uint64_t bound) {
    using u128 = unsigned __int128;
    u128 m = static_cast<u128>(rng()) * bound;
    auto low = static_cast<std::uint64_t>(m);
    if (low < bound) {
        const std::uint64_t threshold = (0 - bound) % bound;
        while (low < threshold) {
            m = static_cast<u128>(rng()) * bound;
            low = static_cast<std::uint64_t>(m);
        }
    }
    return static_cast<std::uint64_t>(m >> 64);
}

/// Double in [0, 1) from the top 53 bits.
template <typename Rng>
double uniform_unit(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

} // namespace kvretain

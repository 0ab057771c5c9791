// Copyright (C) 2026 The kvretain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "kvretain/error.hpp"

namespace kvretain {

// Step model used by simulate_trajectory(), per decode step t = 1..T:
//   1. if the policy fires at t and the cache holds more than b tokens,
//      the cache is recompressed to b;
//   2. the step's token is appended;
//   3. the post-append length is recorded.
// The end-of-prefill cache is min(prefill_len, b).

struct CadencePolicy {
    enum class Kind { Never, EveryC, AtSteps };

    Kind kind = Kind::Never;
    std::size_t budget = 1;
    std::size_t every = 1;
    std::vector<std::size_t> at_steps;

    static CadencePolicy never(std::size_t budget) { return {Kind::Never, budget, 1, {}}; }
    static CadencePolicy every_c_steps(std::size_t c, std::size_t budget) {
        return {Kind::EveryC, budget, c, {}};
    }
    static CadencePolicy at(std::vector<std::size_t> steps, std::size_t budget) {
        return {Kind::AtSteps, budget, 1, std::move(steps)};
    }

    void validate() const {
        KVRETAIN_CHECK(budget >= 1, "cache budget b must be at least 1");
        if (kind == Kind::EveryC) {
            KVRETAIN_CHECK(every >= 1, "compression cadence c must be at least 1");
        }
        if (kind == Kind::AtSteps) {
            for (std::size_t i = 0; i < at_steps.size(); ++i) {
                KVRETAIN_CHECK(at_steps[i] >= 1, "compression steps are 1-based");
                KVRETAIN_CHECK(i == 0 || at_steps[i] > at_steps[i - 1],
                               "compression steps must be strictly increasing");
            }
        }
    }

    bool fires_at(std::size_t step) const {
        switch (kind) {
        case Kind::Never: return false;
        case Kind::EveryC: return step % every == 0;
        case Kind::AtSteps: return std::binary_search(at_steps.begin(), at_steps.end(), step);
        }
        return false;
    }

    std::string describe() const {
        std::ostringstream os;
        switch (kind) {
        case Kind::Never: os << "never"; break;
        case Kind::EveryC: os << "every:" << every; break;
        case Kind::AtSteps:
            os << "at:";
            for (std::size_t i = 0; i < at_steps.size(); ++i) {
                os << (i ? "," : "") << at_steps[i];
            }
            break;
        }
        return os.str();
    }
};

/// Cache length after each decode step.
struct DecodeTrace {
    std::size_t prefill_len = 0;
    std::size_t end_of_prefill = 0;
    std::vector<std::size_t> lengths;

    void validate() const {
        KVRETAIN_CHECK(end_of_prefill >= 1, "end-of-prefill cache must hold at least one token");
        std::size_t prev = end_of_prefill;
        for (std::size_t t = 0; t < lengths.size(); ++t) {
            KVRETAIN_CHECK(lengths[t] >= 1, "cache length must stay positive");
            KVRETAIN_CHECK(lengths[t] <= prev + 1,
                           "cache grew by more than one token at step " + std::to_string(t + 1));
            prev = lengths[t];
        }
    }
};

struct CacheStats {
    double mean_decode_cache = 0.0;
    std::size_t peak_cache = 0;
    std::size_t end_of_prefill_cache = 0;
    std::size_t decode_steps = 0;
    // set when there were no decode steps and the mean is reported as 0
    bool decode_empty = false;
};

inline DecodeTrace simulate_trajectory(std::size_t prefill_len, std::size_t decode_steps,
                                       const CadencePolicy& policy) {
    policy.validate();
    KVRETAIN_CHECK(prefill_len >= 1, "prefill must contain at least one token");
    DecodeTrace trace;
    trace.prefill_len = prefill_len;
    trace.end_of_prefill = std::min(prefill_len, policy.budget);
    trace.lengths.reserve(decode_steps);
    std::size_t length = trace.end_of_prefill;
    for (std::size_t step = 1; step <= decode_steps; ++step) {
        if (policy.fires_at(step) && length > policy.budget) {
            length = policy.budget;
        }
        ++length;
        trace.lengths.push_back(length);
    }
    return trace;
}

/// Mean over decode steps only; peak includes the end-of-prefill cache.
inline CacheStats instrument(const DecodeTrace& trace) {
    trace.validate();
    CacheStats stats;
    stats.end_of_prefill_cache = trace.end_of_prefill;
    stats.peak_cache = trace.end_of_prefill;
    stats.decode_steps = trace.lengths.size();
    if (trace.lengths.empty()) {
        stats.decode_empty = true;
        return stats;
    }
    std::uint64_t total = 0;
    for (auto len : trace.lengths) {
        total += len;
        stats.peak_cache = std::max(stats.peak_cache, len);
    }
    stats.mean_decode_cache = static_cast<double>(total) / static_cast<double>(trace.lengths.size());
    return stats;
}

inline constexpr double kDefaultMatchedMeanTolerance = 0.02;

struct MatchVerdict {
    bool matched = false;
    double mean_a = 0.0;
    double mean_b = 0.0;
    double relative_gap = 0.0;
    bool end_of_prefill_equal = false;
    // equal at end of prefill, yet the decode-time means differ
    bool end_of_prefill_false_positive = false;
    std::string diagnostic;
};

inline MatchVerdict matched_mean_check(const CacheStats& a, const CacheStats& b,
                                       double rel_tol = kDefaultMatchedMeanTolerance) {
    KVRETAIN_CHECK(std::isfinite(rel_tol) && rel_tol > 0.0, "relative tolerance must be positive");
    MatchVerdict v;
    v.mean_a = a.mean_decode_cache;
    v.mean_b = b.mean_decode_cache;
    const double scale = std::max(v.mean_a, v.mean_b);
    const double gap = std::abs(v.mean_a - v.mean_b);
    v.relative_gap = scale > 0.0 ? gap / scale : 0.0;
    v.matched = gap <= rel_tol * scale;
    v.end_of_prefill_equal = a.end_of_prefill_cache == b.end_of_prefill_cache;
    v.end_of_prefill_false_positive = v.end_of_prefill_equal && !v.matched;

    std::ostringstream os;
    os << (v.matched ? "matched" : "MISMATCHED") << ": decode mean " << v.mean_a << " vs "
       << v.mean_b << " (relative gap " << v.relative_gap << ", tolerance " << rel_tol
       << "); end-of-prefill " << a.end_of_prefill_cache << " vs " << b.end_of_prefill_cache;
    if (v.end_of_prefill_false_positive) {
        os << "; end-of-prefill matching would wrongly report these as equal";
    }
    v.diagnostic = os.str();
    return v;
}

} // namespace kvretain

// Copyright (C) 2026 The kvretain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "kvretain/error.hpp"

namespace kvretain {

inline constexpr double kDefaultSignatureEpsilon = 1e-12;

/// Per-token value vectors for every (layer, head), stored row-major as
/// tokens x layers x heads x head_dim.
template <typename T = float>
struct ValueTensorBlock {
    std::size_t tokens = 0;
    std::size_t layers = 1;
    std::size_t heads = 1;
    std::size_t head_dim = 1;
    std::vector<T> values;

    std::size_t vectors_per_token() const { return layers * heads; }

    std::span<const T> vector(std::size_t token, std::size_t layer, std::size_t head) const {
        const std::size_t offset = ((token * layers + layer) * heads + head) * head_dim;
        return {values.data() + offset, head_dim};
    }

    void validate() const {
        KVRETAIN_CHECK(layers >= 1 && heads >= 1 && head_dim >= 1,
                       "value block needs at least one layer, head and dimension");
        KVRETAIN_CHECK(values.size() == tokens * layers * heads * head_dim,
                       "value block payload size " + std::to_string(values.size()) +
                           " does not match shape " + std::to_string(tokens) + "x" +
                           std::to_string(layers) + "x" + std::to_string(heads) + "x" +
                           std::to_string(head_dim));
        const std::size_t per_token = layers * heads * head_dim;
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (!std::isfinite(static_cast<double>(values[i]))) {
                throw ValidationError("non-finite value at token " + std::to_string(i / per_token));
            }
        }
    }
};

/// One V-signature per token. Row i equals u_i / (|u_i| + epsilon), so every
/// row norm lies in [0, 1).
struct SignatureMatrix {
    std::size_t tokens = 0;
    std::size_t dim = 0;
    std::vector<double> rows;
    double epsilon = kDefaultSignatureEpsilon;

    std::span<const double> row(std::size_t i) const { return {rows.data() + i * dim, dim}; }

    void validate() const {
        KVRETAIN_CHECK(rows.size() == tokens * dim, "signature payload does not match shape");
        KVRETAIN_CHECK(epsilon > 0.0, "signature epsilon must be positive");
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (!std::isfinite(rows[i])) {
                throw ValidationError("non-finite signature entry at token " + std::to_string(i / dim));
            }
        }
    }
};

/// Dense symmetric n x n matrix of signature dot products.
class SimilarityMatrix {
public:
    SimilarityMatrix() = default;
    explicit SimilarityMatrix(std::size_t n) : m_n(n), m_data(n * n, 0.0) {}

    std::size_t size() const { return m_n; }
    double operator()(std::size_t i, std::size_t j) const { return m_data[i * m_n + j]; }
    double& operator()(std::size_t i, std::size_t j) { return m_data[i * m_n + j]; }
    std::span<const double> row(std::size_t i) const { return {m_data.data() + i * m_n, m_n}; }

private:
    std::size_t m_n = 0;
    std::vector<double> m_data;
};

struct SelectionConfig {
    std::size_t budget = 1;
    double lambda = 0.0;

    void validate() const {
        KVRETAIN_CHECK(budget >= 1, "selection budget k must be at least 1");
        KVRETAIN_CHECK(std::isfinite(lambda) && lambda >= 0.0,
                       "redundancy weight lambda must be finite and non-negative");
    }
};

/// Sorted, unique token indices kept by one compression event.
struct RetainedSet {
    std::vector<std::size_t> indices;

    std::size_t size() const { return indices.size(); }
    bool operator==(const RetainedSet&) const = default;
};

namespace detail {

inline void require_finite_scores(std::span<const double> scores) {
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!std::isfinite(scores[i])) {
            throw ValidationError("non-finite score at token " + std::to_string(i));
        }
    }
}

inline RetainedSet all_indices(std::size_t n) {
    RetainedSet out;
    out.indices.resize(n);
    std::iota(out.indices.begin(), out.indices.end(), std::size_t{0});
    return out;
}

// Left-to-right dot product of row i against rows j..j+7. Each accumulator
// sums in index order, so every entry equals the plain sequential dot.
inline void dot_block8(const double* a, const double* rows, std::size_t dim, double* out) {
    double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    for (std::size_t t = 0; t < dim; ++t) {
        const double x = a[t];
        for (int k = 0; k < 8; ++k) {
            acc[k] += x * rows[k * dim + t];
        }
    }
    std::copy(acc, acc + 8, out);
}

inline double dot(const double* a, const double* b, std::size_t dim) {
    double acc = 0.0;
    for (std::size_t t = 0; t < dim; ++t) {
        acc += a[t] * b[t];
    }
    return acc;
}

} // namespace detail

/// Averages each token's value vectors over all (layer, head) pairs and
/// normalizes by (norm + epsilon). Sums run in double, left to right.
template <typename T>
SignatureMatrix aggregate_signatures(const ValueTensorBlock<T>& block,
                                     double epsilon = kDefaultSignatureEpsilon) {
    KVRETAIN_CHECK(std::isfinite(epsilon) && epsilon > 0.0, "epsilon must be positive and finite");
    block.validate();

    SignatureMatrix sig;
    sig.tokens = block.tokens;
    sig.dim = block.head_dim;
    sig.epsilon = epsilon;
    sig.rows.assign(block.tokens * block.head_dim, 0.0);

    const double count = static_cast<double>(block.vectors_per_token());
    std::vector<double> mean(block.head_dim);
    for (std::size_t i = 0; i < block.tokens; ++i) {
        std::fill(mean.begin(), mean.end(), 0.0);
        for (std::size_t l = 0; l < block.layers; ++l) {
            for (std::size_t h = 0; h < block.heads; ++h) {
                const auto v = block.vector(i, l, h);
                for (std::size_t t = 0; t < block.head_dim; ++t) {
                    mean[t] += static_cast<double>(v[t]);
                }
            }
        }
        double sq = 0.0;
        for (double& x : mean) {
            x /= count;
            sq += x * x;
        }
        const double denom = std::sqrt(sq) + epsilon;
        double* row = sig.rows.data() + i * sig.dim;
        for (std::size_t t = 0; t < block.head_dim; ++t) {
            row[t] = mean[t] / denom;
        }
    }
    return sig;
}

/// Full n x n matrix of pairwise signature dot products. The upper triangle
/// is computed and mirrored, so the result is exactly symmetric. Rows are
/// split across `threads` workers; output does not depend on the split.
inline SimilarityMatrix cosine_matrix(const SignatureMatrix& sig, unsigned threads = 1) {
    sig.validate();
    const std::size_t n = sig.tokens;
    const std::size_t dim = sig.dim;
    SimilarityMatrix sims(n);
    if (n == 0) {
        return sims;
    }

    auto fill_rows = [&](std::size_t begin, std::size_t end) {
        double block[8];
        for (std::size_t i = begin; i < end; ++i) {
            const double* a = sig.rows.data() + i * dim;
            std::size_t j = i;
            for (; j + 8 <= n; j += 8) {
                detail::dot_block8(a, sig.rows.data() + j * dim, dim, block);
                for (int k = 0; k < 8; ++k) {
                    sims(i, j + k) = block[k];
                }
            }
            for (; j < n; ++j) {
                sims(i, j) = detail::dot(a, sig.rows.data() + j * dim, dim);
            }
        }
    };

    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n)));
    if (threads == 1) {
        fill_rows(0, n);
    } else {
        // Interleave row ranges so that the triangular workload is balanced.
        std::vector<std::thread> pool;
        const std::size_t chunk = 16;
        for (unsigned w = 0; w < threads; ++w) {
            pool.emplace_back([&, w] {
                for (std::size_t start = w * chunk; start < n; start += threads * chunk) {
                    fill_rows(start, std::min(n, start + chunk));
                }
            });
        }
        for (auto& t : pool) {
            t.join();
        }
    }

    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            sims(i, j) = sims(j, i);
        }
    }
    return sims;
}

/// Score minus lambda times the redundancy against the selected set; the
/// redundancy is floored at zero so anti-aligned candidates get no bonus.
constexpr double marginal_gain(double score, double max_sim_to_selected, double lambda) {
    return score - lambda * std::max(0.0, max_sim_to_selected);
}

/// The min(k, n) highest scores, ties toward the lower index, returned sorted.
inline RetainedSet topk(std::span<const double> scores, std::size_t k) {
    KVRETAIN_CHECK(k >= 1, "top-k budget must be at least 1");
    detail::require_finite_scores(scores);
    const std::size_t n = scores.size();
    if (k >= n) {
        return detail::all_indices(n);
    }
    RetainedSet out = detail::all_indices(n);
    auto& idx = out.indices;
    auto better = [&](std::size_t a, std::size_t b) {
        return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    };
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return out;
}

/// Per-step view of the greedy loop, handed to an optional observer.
struct GreedyStep {
    std::size_t step;
    std::size_t picked;
    std::span<const double> gains;       // gains evaluated before the pick; picked ones are -inf
    std::span<const double> running_max; // m after the pick
};

struct NoObserver {
    void operator()(const GreedyStep&) const {}
};

/// Greedy set-conditioned retention. lambda == 0 returns topk() unchanged.
/// Otherwise each pick maximizes marginal_gain() against the elementwise
/// running max m of similarities to the picked set; ties go to the lowest
/// index.
template <typename Observer = NoObserver>
RetainedSet select(std::span<const double> scores, const SignatureMatrix& sig,
                   const SelectionConfig& cfg, Observer&& observer = {}, unsigned threads = 1) {
    cfg.validate();
    KVRETAIN_CHECK(scores.size() == sig.tokens,
                   "score count " + std::to_string(scores.size()) +
                       " does not match signature count " + std::to_string(sig.tokens));
    if (cfg.lambda == 0.0) {
        return topk(scores, cfg.budget);
    }
    detail::require_finite_scores(scores);
    const std::size_t n = scores.size();
    if (cfg.budget >= n) {
        return detail::all_indices(n);
    }

    const SimilarityMatrix sims = cosine_matrix(sig, threads);
    constexpr double kTaken = -std::numeric_limits<double>::infinity();

    std::vector<double> running_max(n, 0.0);
    std::vector<double> gains(n);
    std::vector<bool> taken(n, false);
    RetainedSet out;
    out.indices.reserve(cfg.budget);

    for (std::size_t step = 0; step < cfg.budget; ++step) {
        std::size_t best = n;
        for (std::size_t i = 0; i < n; ++i) {
            if (taken[i]) {
                gains[i] = kTaken;
                continue;
            }
            gains[i] = marginal_gain(scores[i], running_max[i], cfg.lambda);
            if (best == n || gains[i] > gains[best]) {
                best = i;
            }
        }
        taken[best] = true;
        out.indices.push_back(best);
        const auto row = sims.row(best);
        for (std::size_t i = 0; i < n; ++i) {
            running_max[i] = std::max(running_max[i], row[i]);
        }
        observer(GreedyStep{step, best, gains, running_max});
    }

    std::sort(out.indices.begin(), out.indices.end());
    return out;
}

} // namespace kvretain

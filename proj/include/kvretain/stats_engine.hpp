// Copyright (C) 2026 The kvretain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "kvretain/error.hpp"
#include "kvretain/rng.hpp"

namespace kvretain {

/// One evaluation of one problem under one (model, budget, method, lambda, seed).
struct ProblemOutcome {
    std::string problem_id;
    std::string model;
    std::size_t budget = 0;
    std::string method;
    std::optional<double> lambda;
    std::int64_t seed = 0;
    bool correct = false;
    bool extracted = false;
    double mean_cache = 0.0;
    std::size_t peak_cache = 0;
    // fields not listed above, carried through unchanged
    nlohmann::json extra = nlohmann::json::object();

    using Key = std::tuple<std::string, std::string, std::size_t, std::string, std::optional<double>,
                           std::int64_t>;
    Key key() const { return {problem_id, model, budget, method, lambda, seed}; }
};

struct ProblemDelta {
    std::string problem_id;
    double delta = 0.0;
};

/// Per-problem (mean correctness over seeds in a) minus (same in b), sorted
/// by problem id. Both arms must cover the same problems of one cell.
inline std::vector<ProblemDelta> paired_deltas(std::span<const ProblemOutcome> a,
                                               std::span<const ProblemOutcome> b) {
    KVRETAIN_CHECK(!a.empty() && !b.empty(), "both arms need at least one record");
    const auto& ref = a.front();
    auto same_cell = [&](const ProblemOutcome& r) {
        return r.model == ref.model && r.budget == ref.budget;
    };
    for (auto arm : {a, b}) {
        for (const auto& r : arm) {
            KVRETAIN_CHECK(same_cell(r), "records span more than one (model, budget) cell: " +
                                             ref.model + "/" + std::to_string(ref.budget) + " vs " +
                                             r.model + "/" + std::to_string(r.budget));
        }
    }

    struct Tally {
        double correct = 0.0;
        double seeds = 0.0;
    };
    auto tally = [](std::span<const ProblemOutcome> arm) {
        std::map<std::string, Tally> out;
        for (const auto& r : arm) {
            auto& t = out[r.problem_id];
            t.correct += r.correct ? 1.0 : 0.0;
            t.seeds += 1.0;
        }
        return out;
    };
    const auto ta = tally(a);
    const auto tb = tally(b);

    std::vector<std::string> unpaired;
    for (const auto& [id, _] : ta) {
        if (!tb.count(id)) {
            unpaired.push_back(id + " (first arm only)");
        }
    }
    for (const auto& [id, _] : tb) {
        if (!ta.count(id)) {
            unpaired.push_back(id + " (second arm only)");
        }
    }
    if (!unpaired.empty()) {
        std::string msg = std::to_string(unpaired.size()) + " unpaired problems:";
        for (std::size_t i = 0; i < unpaired.size() && i < 20; ++i) {
            msg += " " + unpaired[i];
        }
        throw ValidationError(msg);
    }

    std::vector<ProblemDelta> out;
    out.reserve(ta.size());
    for (const auto& [id, t] : ta) {
        const auto& u = tb.at(id);
        out.push_back({id, t.correct / t.seeds - u.correct / u.seeds});
    }
    return out;
}

inline std::vector<double> delta_values(std::span<const ProblemDelta> deltas) {
    std::vector<double> v;
    v.reserve(deltas.size());
    for (const auto& d : deltas) {
        v.push_back(d.delta);
    }
    return v;
}

struct BootstrapOptions {
    std::size_t n_boot = 10000;
    std::uint64_t rng_seed = 0;
    unsigned threads = 1;
};

struct BootstrapResult {
    double point_pp = 0.0;
    double ci_lo_pp = 0.0;
    double ci_hi_pp = 0.0;
    double p_two_sided = 1.0;
    std::size_t n_problems = 0;
    std::size_t n_boot = 0;
};

namespace detail {

// Linear interpolation between order statistics (the usual "type 7" rule).
inline double percentile_sorted(std::span<const double> sorted, double q) {
    const double h = (static_cast<double>(sorted.size()) - 1.0) * q;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

// Resampled means whose magnitude is below this count as exactly zero, so
// sums of thirds that cancel are not split by rounding noise.
inline constexpr double kZeroBand = 1e-12;

} // namespace detail

/// Cluster bootstrap over problems. Resample r draws from its own
/// SplitMix64 substream of (rng_seed, r), so results are identical for any
/// thread count. CI is the 2.5/97.5 percentile of resampled means. The
/// two-sided p doubles the smaller add-one-smoothed tail,
/// 2 * min((#{mean* <= 0} + 1) / (B + 1), (#{mean* >= 0} + 1) / (B + 1)),
/// clipped to 1.
inline BootstrapResult cluster_bootstrap(std::span<const double> deltas,
                                         const BootstrapOptions& opt = {}) {
    KVRETAIN_CHECK(!deltas.empty(), "cluster bootstrap needs at least one problem");
    KVRETAIN_CHECK(opt.n_boot >= 1, "n_boot must be at least 1");
    for (double d : deltas) {
        KVRETAIN_CHECK(std::isfinite(d), "non-finite per-problem delta");
    }
    const std::size_t n = deltas.size();
    const std::size_t B = opt.n_boot;

    double total = 0.0;
    for (double d : deltas) {
        total += d;
    }

    std::vector<double> means(B);
    auto run = [&](std::size_t begin, std::size_t end) {
        for (std::size_t r = begin; r < end; ++r) {
            auto rng = SplitMix64::substream(opt.rng_seed, r);
            double sum = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                sum += deltas[uniform_below(rng, n)];
            }
            means[r] = sum / static_cast<double>(n);
        }
    };
    const unsigned threads = std::max(1u, std::min<unsigned>(opt.threads, static_cast<unsigned>(B)));
    if (threads == 1) {
        run(0, B);
    } else {
        std::vector<std::thread> pool;
        const std::size_t chunk = (B + threads - 1) / threads;
        for (unsigned w = 0; w < threads; ++w) {
            const std::size_t begin = w * chunk;
            const std::size_t end = std::min(B, begin + chunk);
            if (begin < end) {
                pool.emplace_back(run, begin, end);
            }
        }
        for (auto& t : pool) {
            t.join();
        }
    }

    std::size_t at_or_below = 0;
    std::size_t at_or_above = 0;
    for (double m : means) {
        at_or_below += m <= detail::kZeroBand;
        at_or_above += m >= -detail::kZeroBand;
    }
    std::sort(means.begin(), means.end());

    BootstrapResult res;
    res.n_problems = n;
    res.n_boot = B;
    res.point_pp = 100.0 * total / static_cast<double>(n);
    res.ci_lo_pp = 100.0 * detail::percentile_sorted(means, 0.025);
    res.ci_hi_pp = 100.0 * detail::percentile_sorted(means, 0.975);
    const double denom = static_cast<double>(B) + 1.0;
    const double tail = std::min((static_cast<double>(at_or_below) + 1.0) / denom,
                                 (static_cast<double>(at_or_above) + 1.0) / denom);
    res.p_two_sided = std::min(1.0, 2.0 * tail);
    return res;
}

/// One (model, budget) contrast.
struct CellResult {
    std::string model;
    std::size_t budget = 0;
    double delta_pp = 0.0;
    double ci_lo_pp = 0.0;
    double ci_hi_pp = 0.0;
    double p = 1.0;
    bool bonferroni_pass = false;
    std::size_t n_problems = 0;

    std::string label() const { return model + " b=" + std::to_string(budget); }
};

inline constexpr double kDefaultFamilyAlpha = 0.05;

inline double bonferroni_threshold(std::size_t family_size, double family_alpha) {
    return family_alpha / static_cast<double>(family_size);
}

/// Marks a cell as passing iff p < family_alpha / |cells| and delta_pp > 0.
inline std::vector<CellResult> bonferroni_evaluate(std::vector<CellResult> cells,
                                                   double family_alpha = kDefaultFamilyAlpha) {
    KVRETAIN_CHECK(!cells.empty(), "Bonferroni family is empty");
    KVRETAIN_CHECK(family_alpha > 0.0 && family_alpha <= 1.0, "family alpha must be in (0, 1]");
    const double threshold = bonferroni_threshold(cells.size(), family_alpha);
    for (auto& c : cells) {
        KVRETAIN_CHECK(c.p >= 0.0 && c.p <= 1.0, "p-value outside [0, 1] in cell " + c.label());
        c.bonferroni_pass = c.p < threshold && c.delta_pp > 0.0;
    }
    return cells;
}

// ---------------------------------------------------------------------------
// Phase-1 lambda probe

struct ProbeCell {
    std::string model;
    std::size_t budget = 0;
    double lambda = 0.0;
    double delta_pp = 0.0;
    std::size_t n = 0;
    // problems the cell should have; 0 means "largest n seen for this cell"
    std::size_t reference_n = 0;
};

struct ProbeTable {
    std::vector<ProbeCell> cells;

    std::vector<double> lambdas() const {
        std::set<double> s;
        for (const auto& c : cells) {
            s.insert(c.lambda);
        }
        return {s.begin(), s.end()};
    }
};

struct LambdaSummary {
    double lambda = 0.0;
    double mean_delta_pp = 0.0;
    std::size_t cells_used = 0;
    std::vector<std::string> missing_cells;
    std::vector<std::string> short_cells;
};

struct ProbeSelection {
    double winner = 0.0;
    double argmax_lambda = 0.0;
    bool occam_applied = false;
    bool no_positive_mean = false;
    std::vector<LambdaSummary> summaries;           // all present cells
    std::vector<LambdaSummary> short_excluded;      // each arm without its own short cells
    std::vector<double> ranking;                    // best first
    std::vector<double> short_excluded_ranking;
    std::vector<std::string> warnings;
};

namespace detail {

inline std::vector<double> rank_lambdas(const std::vector<LambdaSummary>& s) {
    std::vector<const LambdaSummary*> order;
    for (const auto& x : s) {
        if (x.cells_used > 0) {
            order.push_back(&x);
        }
    }
    std::stable_sort(order.begin(), order.end(), [](auto* a, auto* b) {
        return a->mean_delta_pp > b->mean_delta_pp ||
               (a->mean_delta_pp == b->mean_delta_pp && a->lambda < b->lambda);
    });
    std::vector<double> out;
    for (auto* x : order) {
        out.push_back(x->lambda);
    }
    return out;
}

// Slack on the tie tolerance so a gap printed as exactly 0.5 counts as a tie.
inline constexpr double kTieSlack = 1e-9;

} // namespace detail

/// Picks the lambda with the largest unweighted mean delta across cells;
/// any smaller lambda within tie_tol_pp of that maximum wins instead
/// (the smallest such one).
inline ProbeSelection phase1_select(const ProbeTable& table, double tie_tol_pp = 0.5) {
    KVRETAIN_CHECK(!table.cells.empty(), "probe table is empty");
    KVRETAIN_CHECK(tie_tol_pp >= 0.0, "tie tolerance must be non-negative");

    using CellKey = std::pair<std::string, std::size_t>;
    std::map<CellKey, std::map<double, const ProbeCell*>> grid;
    for (const auto& c : table.cells) {
        KVRETAIN_CHECK(std::isfinite(c.delta_pp) && std::isfinite(c.lambda),
                       "non-finite entry in probe table");
        auto& slot = grid[{c.model, c.budget}][c.lambda];
        KVRETAIN_CHECK(slot == nullptr, "duplicate probe cell " + c.model + " b=" +
                                            std::to_string(c.budget) + " lambda=" +
                                            std::to_string(c.lambda));
        slot = &c;
    }
    std::map<CellKey, std::size_t> reference;
    for (const auto& [key, arms] : grid) {
        std::size_t ref = 0;
        for (const auto& [lam, cell] : arms) {
            ref = std::max({ref, cell->n, cell->reference_n});
        }
        reference[key] = ref;
    }

    ProbeSelection sel;
    const auto lambdas = table.lambdas();
    for (bool exclude_short : {false, true}) {
        auto& out = exclude_short ? sel.short_excluded : sel.summaries;
        for (double lam : lambdas) {
            LambdaSummary s;
            s.lambda = lam;
            double sum = 0.0;
            // std::map iteration gives a fixed (model, budget) summation order
            for (const auto& [key, arms] : grid) {
                const std::string label = key.first + " b=" + std::to_string(key.second);
                auto it = arms.find(lam);
                if (it == arms.end()) {
                    s.missing_cells.push_back(label);
                    continue;
                }
                const ProbeCell& c = *it->second;
                const std::size_t ref = c.reference_n ? c.reference_n : reference[key];
                const bool is_short = c.n < ref;
                if (is_short) {
                    s.short_cells.push_back(label);
                    if (exclude_short) {
                        continue;
                    }
                }
                sum += c.delta_pp;
                ++s.cells_used;
            }
            s.mean_delta_pp = s.cells_used ? sum / static_cast<double>(s.cells_used) : 0.0;
            out.push_back(std::move(s));
        }
    }

    for (const auto& s : sel.summaries) {
        std::string lam = nlohmann::json(s.lambda).dump();
        if (!s.missing_cells.empty()) {
            sel.warnings.push_back("lambda=" + lam + ": " + std::to_string(s.missing_cells.size()) +
                                   " missing cell(s); mean taken over present cells");
        }
        if (!s.short_cells.empty()) {
            sel.warnings.push_back("lambda=" + lam + ": " + std::to_string(s.short_cells.size()) +
                                   " short cell(s)");
        }
    }

    sel.ranking = detail::rank_lambdas(sel.summaries);
    sel.short_excluded_ranking = detail::rank_lambdas(sel.short_excluded);
    KVRETAIN_CHECK(!sel.ranking.empty(), "no lambda has any probe cell");

    sel.argmax_lambda = sel.ranking.front();
    double best_mean = 0.0;
    for (const auto& s : sel.summaries) {
        if (s.lambda == sel.argmax_lambda) {
            best_mean = s.mean_delta_pp;
        }
    }
    sel.winner = sel.argmax_lambda;
    for (const auto& s : sel.summaries) { // ascending lambda
        if (s.cells_used > 0 && s.lambda < sel.argmax_lambda &&
            best_mean - s.mean_delta_pp <= tie_tol_pp + detail::kTieSlack) {
            sel.winner = s.lambda;
            sel.occam_applied = true;
            break;
        }
    }
    sel.no_positive_mean = best_mean <= 0.0;
    if (sel.no_positive_mean) {
        sel.warnings.push_back("no lambda has a positive mean delta");
    }
    return sel;
}

// ---------------------------------------------------------------------------
// Branch A/B/C decision

enum class Branch { A, B, C };

inline const char* to_string(Branch b) {
    switch (b) {
    case Branch::A: return "A";
    case Branch::B: return "B";
    case Branch::C: return "C";
    }
    return "C";
}

enum class GuardAlpha { PerCell, Bonferroni };

struct BranchRule {
    // model labels are matched case-insensitively by substring
    std::string primary_family = "qwen";
    std::string transfer_family = "llama";
    double per_cell_alpha = 0.05;
    double family_alpha = kDefaultFamilyAlpha;
    GuardAlpha guard = GuardAlpha::PerCell;
};

struct BranchVerdict {
    Branch branch = Branch::C;
    std::vector<CellResult> primary_qualifying_cells;
    double transfer_mean_delta_pp = 0.0;
    std::vector<CellResult> negative_guard_violations;
    Branch symmetric_guard_branch = Branch::C;
    std::vector<CellResult> symmetric_guard_violations;
    double guard_alpha = 0.05;
};

namespace detail {

inline bool contains_ci(const std::string& hay, const std::string& needle) {
    auto lower = [](std::string s) {
        for (char& ch : s) {
            ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        }
        return s;
    };
    return lower(hay).find(lower(needle)) != std::string::npos;
}

} // namespace detail

/// Branch A: some primary-family cell has delta > 0 at p < per_cell_alpha,
/// the transfer family's mean delta is positive, and no transfer cell is
/// significantly negative. Branch B: the primary condition holds but a
/// transfer condition fails. Branch C: no qualifying primary cell. The
/// symmetric variant applies the negative guard to every cell.
inline BranchVerdict branch_decide(std::span<const CellResult> cells, const BranchRule& rule = {}) {
    KVRETAIN_CHECK(!cells.empty(), "no cells to decide on");
    KVRETAIN_CHECK(!detail::contains_ci(rule.primary_family, rule.transfer_family) &&
                       !detail::contains_ci(rule.transfer_family, rule.primary_family),
                   "model family labels must not overlap");

    std::vector<CellResult> primary;
    std::vector<CellResult> transfer;
    std::set<std::size_t> primary_budgets;
    std::set<std::size_t> transfer_budgets;
    for (const auto& c : cells) {
        KVRETAIN_CHECK(std::isfinite(c.delta_pp) && c.p >= 0.0 && c.p <= 1.0,
                       "invalid delta or p in cell " + c.label());
        const bool is_primary = detail::contains_ci(c.model, rule.primary_family);
        const bool is_transfer = detail::contains_ci(c.model, rule.transfer_family);
        KVRETAIN_CHECK(is_primary != is_transfer,
                       "cell " + c.label() + " does not belong to exactly one model family");
        auto& budgets = is_primary ? primary_budgets : transfer_budgets;
        KVRETAIN_CHECK(budgets.insert(c.budget).second, "duplicate cell for " + c.label());
        (is_primary ? primary : transfer).push_back(c);
    }
    KVRETAIN_CHECK(!primary.empty(), "no cells for model family '" + rule.primary_family + "'");
    KVRETAIN_CHECK(!transfer.empty(), "no cells for model family '" + rule.transfer_family + "'");
    if (primary_budgets != transfer_budgets) {
        std::string msg = "family is incomplete; missing:";
        for (auto b : primary_budgets) {
            if (!transfer_budgets.count(b)) {
                msg += " " + rule.transfer_family + " b=" + std::to_string(b);
            }
        }
        for (auto b : transfer_budgets) {
            if (!primary_budgets.count(b)) {
                msg += " " + rule.primary_family + " b=" + std::to_string(b);
            }
        }
        throw ValidationError(msg);
    }

    BranchVerdict v;
    v.guard_alpha = rule.guard == GuardAlpha::PerCell
                        ? rule.per_cell_alpha
                        : bonferroni_threshold(cells.size(), rule.family_alpha);

    for (const auto& c : primary) {
        if (c.delta_pp > 0.0 && c.p < rule.per_cell_alpha) {
            v.primary_qualifying_cells.push_back(c);
        }
    }
    double sum = 0.0;
    for (const auto& c : transfer) {
        sum += c.delta_pp;
    }
    v.transfer_mean_delta_pp = sum / static_cast<double>(transfer.size());

    auto significantly_negative = [&](const CellResult& c) {
        return c.delta_pp < 0.0 && c.p < v.guard_alpha;
    };
    for (const auto& c : cells) {
        if (significantly_negative(c)) {
            v.symmetric_guard_violations.push_back(c);
            if (detail::contains_ci(c.model, rule.transfer_family)) {
                v.negative_guard_violations.push_back(c);
            }
        }
    }

    auto decide = [&](bool guard_ok) {
        if (v.primary_qualifying_cells.empty()) {
            return Branch::C;
        }
        return v.transfer_mean_delta_pp > 0.0 && guard_ok ? Branch::A : Branch::B;
    };
    v.branch = decide(v.negative_guard_violations.empty());
    v.symmetric_guard_branch = decide(v.symmetric_guard_violations.empty());
    return v;
}

} // namespace kvretain

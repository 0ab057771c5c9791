// Copyright (C) 2026 The kvretain Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "kvretain/stats_engine.hpp"
#include "oracles.hpp"

using namespace kvretain;

namespace {

ProblemOutcome outcome(const std::string& id, const std::string& method, std::int64_t seed, bool correct,
                       const std::string& model = "qwen7b", std::size_t budget = 128) {
    ProblemOutcome r;
    r.problem_id = id;
    r.model = model;
    r.budget = budget;
    r.method = method;
    r.seed = seed;
    r.correct = correct;
    r.extracted = true;
    return r;
}

std::vector<CellResult> reference_cells() {
    return {
        {"qwen7b", 64, 1.56, -0.89, 4.01, 0.20, false, 0},
        {"qwen7b", 128, 4.79, 1.67, 7.92, 0.0022, false, 0},
        {"llama8b", 64, 2.23, 0.56, 3.90, 0.0054, false, 0},
        {"llama8b", 128, -0.22, -2.45, 2.01, 0.86, false, 0},
    };
}

ProbeTable reference_probe() {
    ProbeTable t;
    auto add = [&](const char* m, std::size_t b, double lam, double d, std::size_t n) {
        t.cells.push_back({m, b, lam, d, n, 201});
    };
    add("qwen7b", 64, 0.5, 0.5, 201);
    add("qwen7b", 64, 1.0, -1.0, 201);
    add("qwen7b", 64, 1.5, 2.5, 200);
    add("qwen7b", 128, 0.5, 4.0, 201);
    add("qwen7b", 128, 1.0, 1.0, 201);
    add("qwen7b", 128, 1.5, 1.0, 164);
    add("llama8b", 64, 0.5, 0.0, 201);
    add("llama8b", 64, 1.0, 0.0, 201);
    add("llama8b", 64, 1.5, -1.9, 196);
    add("llama8b", 128, 0.5, -1.5, 201);
    add("llama8b", 128, 1.0, -2.0, 201);
    add("llama8b", 128, 1.5, 0.0, 201);
    return t;
}

const LambdaSummary& summary_for(const std::vector<LambdaSummary>& v, double lambda) {
    return *std::find_if(v.begin(), v.end(), [&](const LambdaSummary& s) { return s.lambda == lambda; });
}

} // namespace

TEST(PairedDeltas, Examples) {
    std::vector<ProblemOutcome> a, b;
    for (int s = 0; s < 3; ++s) {
        a.push_back(outcome("p1", "div", s, true));
        b.push_back(outcome("p1", "base", s, false));
        a.push_back(outcome("p2", "div", s, s < 2)); // 2/3
        b.push_back(outcome("p2", "base", s, s == 0)); // 1/3
        a.push_back(outcome("p3", "div", s, s == 1));
        b.push_back(outcome("p3", "base", s, s == 1));
    }
    const auto d = paired_deltas(a, b);
    ASSERT_EQ(d.size(), 3u);
    EXPECT_EQ(d[0].problem_id, "p1");
    EXPECT_EQ(d[0].delta, 1.0);
    EXPECT_NEAR(d[1].delta, 1.0 / 3.0, 1e-15);
    EXPECT_EQ(d[2].delta, 0.0);

    const auto self = paired_deltas(a, a);
    for (const auto& x : self) {
        EXPECT_EQ(x.delta, 0.0);
    }
}

TEST(PairedDeltas, UnpairedProblemsAreListed) {
    std::vector<ProblemOutcome> a = {outcome("p1", "div", 0, true), outcome("p2", "div", 0, true)};
    std::vector<ProblemOutcome> b = {outcome("p1", "base", 0, true), outcome("p3", "base", 0, true)};
    try {
        paired_deltas(a, b);
        FAIL();
    } catch (const ValidationError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("p2"), std::string::npos);
        EXPECT_NE(msg.find("p3"), std::string::npos);
    }
}

TEST(PairedDeltas, RejectsMixedCells) {
    std::vector<ProblemOutcome> a = {outcome("p1", "div", 0, true)};
    std::vector<ProblemOutcome> b = {outcome("p1", "base", 0, true, "qwen7b", 64)};
    EXPECT_THROW(paired_deltas(a, b), ValidationError);
    EXPECT_THROW(paired_deltas({}, b), ValidationError);
}

TEST(ClusterBootstrap, DegenerateZero) {
    const std::vector<double> d(50, 0.0);
    const auto r = cluster_bootstrap(d, {1000, 1, 1});
    EXPECT_EQ(r.point_pp, 0.0);
    EXPECT_EQ(r.ci_lo_pp, 0.0);
    EXPECT_EQ(r.ci_hi_pp, 0.0);
    EXPECT_EQ(r.p_two_sided, 1.0);
}

TEST(ClusterBootstrap, DegeneratePositive) {
    const std::vector<double> d(50, 1.0);
    const auto r = cluster_bootstrap(d, {10000, 1, 1});
    EXPECT_EQ(r.point_pp, 100.0);
    EXPECT_EQ(r.ci_lo_pp, 100.0);
    EXPECT_EQ(r.ci_hi_pp, 100.0);
    EXPECT_DOUBLE_EQ(r.p_two_sided, 2.0 / 10001.0);
}

TEST(ClusterBootstrap, Validation) {
    EXPECT_THROW(cluster_bootstrap(std::vector<double>{}, {}), ValidationError);
    EXPECT_THROW(cluster_bootstrap(std::vector<double>{1.0}, {0, 1, 1}), ValidationError);
    EXPECT_THROW(cluster_bootstrap(std::vector<double>{std::nan("")}, {}), ValidationError);
}

TEST(ClusterBootstrap, DeterministicAndThreadIndependent) {
    SplitMix64 rng(12);
    const auto d = synth::paired_deltas(rng, 299, 3, 0.03);
    const auto a = cluster_bootstrap(d, {5000, 7, 1});
    const auto b = cluster_bootstrap(d, {5000, 7, 1});
    const auto c = cluster_bootstrap(d, {5000, 7, 4});
    EXPECT_EQ(a.p_two_sided, b.p_two_sided);
    EXPECT_EQ(a.ci_lo_pp, c.ci_lo_pp);
    EXPECT_EQ(a.ci_hi_pp, c.ci_hi_pp);
    EXPECT_EQ(a.p_two_sided, c.p_two_sided);
    const auto other = cluster_bootstrap(d, {5000, 8, 1});
    EXPECT_NE(a.ci_lo_pp, other.ci_lo_pp);
}

TEST(ClusterBootstrap, PointInsideCiAndPInRange) {
    SplitMix64 rng(13);
    for (int trial = 0; trial < 20; ++trial) {
        const auto d = synth::paired_deltas(rng, 100 + uniform_below(rng, 200), 3, 0.05 * uniform_unit(rng));
        const auto r = cluster_bootstrap(d, {2000, static_cast<std::uint64_t>(trial), 1});
        EXPECT_LE(r.ci_lo_pp, r.point_pp);
        EXPECT_GE(r.ci_hi_pp, r.point_pp);
        EXPECT_GE(r.p_two_sided, 0.0);
        EXPECT_LE(r.p_two_sided, 1.0);
    }
}

// Swapping arms negates the deltas: point and CI mirror, p is unchanged.
TEST(ClusterBootstrap, Antisymmetry) {
    SplitMix64 rng(14);
    for (int trial = 0; trial < 10; ++trial) {
        const auto d = synth::paired_deltas(rng, 299, 3, 0.04 * uniform_unit(rng) - 0.02);
        std::vector<double> neg(d.size());
        std::transform(d.begin(), d.end(), neg.begin(), [](double x) { return -x; });
        const auto r = cluster_bootstrap(d, {3000, 99, 1});
        const auto s = cluster_bootstrap(neg, {3000, 99, 1});
        EXPECT_NEAR(s.point_pp, -r.point_pp, 1e-12);
        EXPECT_NEAR(s.ci_lo_pp, -r.ci_hi_pp, 1e-9);
        EXPECT_NEAR(s.ci_hi_pp, -r.ci_lo_pp, 1e-9);
        EXPECT_EQ(s.p_two_sided, r.p_two_sided);
    }
}

TEST(ClusterBootstrap, PositiveScalingLeavesPUnchanged) {
    SplitMix64 rng(15);
    const auto d = synth::paired_deltas(rng, 299, 3, 0.02);
    for (double c : {0.5, 2.0, 7.25}) {
        std::vector<double> scaled(d.size());
        std::transform(d.begin(), d.end(), scaled.begin(), [c](double x) { return c * x; });
        EXPECT_EQ(cluster_bootstrap(d, {4000, 3, 1}).p_two_sided,
                  cluster_bootstrap(scaled, {4000, 3, 1}).p_two_sided);
    }
}

TEST(ClusterBootstrap, StableInReplicateCount) {
    // Table-2-like cells: 299 problems, 3 seeds, effects spanning the table.
    SplitMix64 rng(16);
    for (double effect : {0.0, 0.015, 0.025, 0.045}) {
        const auto d = synth::paired_deltas(rng, 299, 3, effect);
        const double p10 = cluster_bootstrap(d, {10000, 21, 1}).p_two_sided;
        const double p20 = cluster_bootstrap(d, {20000, 21, 1}).p_two_sided;
        EXPECT_LT(std::abs(p10 - p20), 0.005) << "effect " << effect;
    }
}

TEST(Bonferroni, ReferenceCellsPassExactlyTwo) {
    const auto cells = bonferroni_evaluate(reference_cells());
    EXPECT_FALSE(cells[0].bonferroni_pass);
    EXPECT_TRUE(cells[1].bonferroni_pass);
    EXPECT_TRUE(cells[2].bonferroni_pass);
    EXPECT_FALSE(cells[3].bonferroni_pass);
}

TEST(Bonferroni, StrictBoundaryAndSingleCell) {
    auto cells = reference_cells();
    cells[0].p = 0.0125;
    EXPECT_FALSE(bonferroni_evaluate(cells)[0].bonferroni_pass);
    std::vector<CellResult> one = {{"qwen7b", 64, 1.0, 0, 2, 0.04, false, 0}};
    EXPECT_TRUE(bonferroni_evaluate(one)[0].bonferroni_pass);
    EXPECT_THROW(bonferroni_evaluate({}), ValidationError);
}

TEST(Bonferroni, NeverPassesNonPositiveDelta) {
    SplitMix64 rng(17);
    for (int i = 0; i < 1000; ++i) {
        std::vector<CellResult> cells(4);
        for (auto& c : cells) {
            c.delta_pp = 10.0 * uniform_unit(rng) - 5.0;
            if (uniform_below(rng, 4) == 0) {
                c.delta_pp = 0.0;
            }
            c.p = 0.02 * uniform_unit(rng);
        }
        for (const auto& c : bonferroni_evaluate(cells)) {
            if (c.delta_pp <= 0.0) {
                EXPECT_FALSE(c.bonferroni_pass);
            }
        }
    }
}

TEST(Phase1Select, ReferenceProbePicksHalf) {
    const auto sel = phase1_select(reference_probe());
    EXPECT_EQ(sel.winner, 0.5);
    EXPECT_EQ(sel.argmax_lambda, 0.5);
    EXPECT_FALSE(sel.occam_applied);
    EXPECT_NEAR(summary_for(sel.summaries, 0.5).mean_delta_pp, 0.75, 1e-12);
    EXPECT_NEAR(summary_for(sel.summaries, 1.0).mean_delta_pp, -0.50, 1e-12);
    // unweighted mean of the printed cells; the table's aggregate row shows +0.43
    EXPECT_NEAR(summary_for(sel.summaries, 1.5).mean_delta_pp, 0.40, 1e-12);
    EXPECT_EQ(summary_for(sel.summaries, 1.5).short_cells.size(), 3u);
    EXPECT_EQ(sel.ranking, (std::vector<double>{0.5, 1.5, 1.0}));
    EXPECT_EQ(sel.short_excluded_ranking, (std::vector<double>{0.5, 1.5, 1.0}));
    EXPECT_FALSE(sel.warnings.empty());
}

TEST(Phase1Select, OccamTieBreak) {
    ProbeTable t;
    t.cells = {{"m", 64, 0.5, 1.0, 10, 0}, {"m", 64, 1.0, 1.0, 10, 0}};
    EXPECT_EQ(phase1_select(t).winner, 0.5);
    t.cells = {{"m", 64, 0.5, 1.0, 10, 0}, {"m", 64, 1.0, 1.4, 10, 0}};
    auto sel = phase1_select(t);
    EXPECT_EQ(sel.argmax_lambda, 1.0);
    EXPECT_EQ(sel.winner, 0.5);
    EXPECT_TRUE(sel.occam_applied);
    t.cells = {{"m", 64, 0.5, 1.0, 10, 0}, {"m", 64, 1.0, 1.6, 10, 0}};
    EXPECT_EQ(phase1_select(t).winner, 1.0);
}

TEST(Phase1Select, AllNegativeStillPicksButFlags) {
    ProbeTable t;
    t.cells = {{"m", 64, 0.5, -3.0, 10, 0}, {"m", 64, 1.0, -1.0, 10, 0}, {"m", 64, 2.0, -2.0, 10, 0}};
    const auto sel = phase1_select(t);
    EXPECT_EQ(sel.winner, 1.0);
    EXPECT_TRUE(sel.no_positive_mean);
}

TEST(Phase1Select, MissingCellsWarned) {
    ProbeTable t;
    t.cells = {{"a", 64, 0.5, 1.0, 10, 0}, {"b", 64, 0.5, 1.0, 10, 0}, {"a", 64, 1.0, 3.0, 10, 0}};
    const auto sel = phase1_select(t);
    EXPECT_EQ(summary_for(sel.summaries, 1.0).missing_cells.size(), 1u);
    EXPECT_EQ(sel.winner, 1.0);
    EXPECT_THROW(phase1_select(ProbeTable{}), ValidationError);
}

TEST(Phase1Select, PermutationInvariant) {
    SplitMix64 rng(18);
    auto t = reference_probe();
    const auto ref = phase1_select(t);
    for (int i = 0; i < 50; ++i) {
        for (std::size_t j = t.cells.size() - 1; j > 0; --j) {
            std::swap(t.cells[j], t.cells[uniform_below(rng, j + 1)]);
        }
        const auto sel = phase1_select(t);
        EXPECT_EQ(sel.winner, ref.winner);
        for (double lam : {0.5, 1.0, 1.5}) {
            EXPECT_EQ(summary_for(sel.summaries, lam).mean_delta_pp,
                      summary_for(ref.summaries, lam).mean_delta_pp);
        }
    }
}

TEST(BranchDecide, ReferenceCellsAreBranchA) {
    const auto v = branch_decide(bonferroni_evaluate(reference_cells()));
    EXPECT_EQ(v.branch, Branch::A);
    EXPECT_EQ(v.symmetric_guard_branch, Branch::A);
    EXPECT_NEAR(v.transfer_mean_delta_pp, 1.00, 0.01);
    ASSERT_EQ(v.primary_qualifying_cells.size(), 1u);
    EXPECT_EQ(v.primary_qualifying_cells[0].budget, 128u);
    EXPECT_TRUE(v.negative_guard_violations.empty());
}

TEST(BranchDecide, NoQualifyingPrimaryCellIsC) {
    auto cells = reference_cells();
    cells[1].p = 0.06;
    EXPECT_EQ(branch_decide(cells).branch, Branch::C);
}

TEST(BranchDecide, SignificantlyNegativeTransferCellIsB) {
    auto cells = reference_cells();
    cells[3].delta_pp = -3.0;
    cells[3].p = 0.01;
    cells[2].delta_pp = 5.0;
    const auto v = branch_decide(cells);
    EXPECT_EQ(v.branch, Branch::B);
    ASSERT_EQ(v.negative_guard_violations.size(), 1u);
    EXPECT_EQ(v.negative_guard_violations[0].label(), "llama8b b=128");
}

TEST(BranchDecide, SymmetricGuardCatchesPrimaryFamily) {
    auto cells = reference_cells();
    cells[0].delta_pp = -2.0;
    cells[0].p = 0.03;
    const auto v = branch_decide(cells);
    EXPECT_EQ(v.branch, Branch::A);
    EXPECT_EQ(v.symmetric_guard_branch, Branch::B);
    BranchRule bonf;
    bonf.guard = GuardAlpha::Bonferroni;
    EXPECT_EQ(branch_decide(cells, bonf).symmetric_guard_branch, Branch::A);
}

TEST(BranchDecide, ValidatesFamily) {
    auto cells = reference_cells();
    cells.pop_back();
    EXPECT_THROW(branch_decide(cells), ValidationError);
    cells = reference_cells();
    cells[0].model = "mistral";
    EXPECT_THROW(branch_decide(cells), ValidationError);
    cells = reference_cells();
    cells[1].budget = 64;
    EXPECT_THROW(branch_decide(cells), ValidationError);
}

// Random cells: the verdict is always exactly one branch and matches the
// rule read directly.
TEST(BranchDecide, ExclusiveAndExhaustive) {
    SplitMix64 rng(19);
    for (int i = 0; i < 2000; ++i) {
        auto cells = reference_cells();
        for (auto& c : cells) {
            c.delta_pp = 10.0 * uniform_unit(rng) - 5.0;
            c.p = uniform_below(rng, 2) ? 0.1 * uniform_unit(rng) : uniform_unit(rng);
        }
        const auto v = branch_decide(cells);
        const bool qwen = (cells[0].delta_pp > 0 && cells[0].p < 0.05) || (cells[1].delta_pp > 0 && cells[1].p < 0.05);
        const bool mean_ok = cells[2].delta_pp + cells[3].delta_pp > 0;
        const bool guard_ok = !(cells[2].delta_pp < 0 && cells[2].p < 0.05) && !(cells[3].delta_pp < 0 && cells[3].p < 0.05);
        const bool a = qwen && mean_ok && guard_ok;
        const bool b = qwen && !(mean_ok && guard_ok);
        const bool c = !qwen;
        EXPECT_EQ(int(a) + int(b) + int(c), 1);
        EXPECT_EQ(v.branch, a ? Branch::A : (b ? Branch::B : Branch::C));
    }
}

// Scaling every per-problem delta by a positive constant and re-running the
// bootstrap leaves the verdict unchanged.
TEST(BranchDecide, ScaleInvariantThroughBootstrap) {
    SplitMix64 rng(20);
    const std::vector<std::pair<std::string, std::size_t>> keys = {
        {"qwen7b", 64}, {"qwen7b", 128}, {"llama8b", 64}, {"llama8b", 128}};
    for (int trial = 0; trial < 6; ++trial) {
        std::vector<std::vector<double>> deltas;
        for (std::size_t k = 0; k < keys.size(); ++k) {
            deltas.push_back(synth::paired_deltas(rng, 299, 3, 0.06 * uniform_unit(rng) - 0.02));
        }
        auto decide = [&](double scale) {
            std::vector<CellResult> cells;
            for (std::size_t k = 0; k < keys.size(); ++k) {
                std::vector<double> d = deltas[k];
                for (auto& x : d) {
                    x *= scale;
                }
                const auto r = cluster_bootstrap(d, {2000, 5, 1});
                cells.push_back({keys[k].first, keys[k].second, r.point_pp, r.ci_lo_pp, r.ci_hi_pp, r.p_two_sided, false, d.size()});
            }
            const auto v = branch_decide(bonferroni_evaluate(cells));
            return std::make_pair(v.branch, v.symmetric_guard_branch);
        };
        EXPECT_EQ(decide(1.0), decide(3.0));
        EXPECT_EQ(decide(1.0), decide(0.25));
    }
}

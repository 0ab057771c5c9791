// Copyright (C) 2026 The kvretain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <unistd.h>

#include "kvretain/cache_accounting.hpp"
#include "kvretain/error.hpp"
#include "kvretain/records_io.hpp"
#include "kvretain/retention_core.hpp"
#include "kvretain/split_protocol.hpp"
#include "kvretain/stats_engine.hpp"
#include "kvretain/tensor_io.hpp"

namespace kvretain::cli {

struct RunConfig {
    std::string command;

    // inputs
    std::string scores_path;
    std::string values_path;
    std::string ids_path;
    std::string records_path;
    std::string table_path;
    std::string cells_path;
    std::string manifest_path;

    // outputs; empty means stdout
    std::string out_path;
    std::string csv_path;
    std::string plot_data_path;

    // select
    std::size_t k = 0;
    double lambda = 0.0;
    double epsilon = kDefaultSignatureEpsilon;

    // simulate
    std::size_t prefill_len = 0;
    std::size_t decode_steps = 0;
    std::size_t budget = 0;
    std::string policy = "never";
    std::string compare_policy;
    double rel_tol = kDefaultMatchedMeanTolerance;

    // analyze
    std::string baseline_method = "1d";
    std::string treatment_method = "1d_div";
    std::optional<double> treatment_lambda;
    std::size_t n_boot = 10000;
    std::uint64_t rng_seed = 0;
    unsigned threads = 1;
    double tie_tol_pp = 0.5;
    double family_alpha = kDefaultFamilyAlpha;

    // decide
    bool symmetric_guard = false;
    std::string primary_family = "qwen";
    std::string transfer_family = "llama";
    std::string guard_alpha = "per-cell";
};

inline void validate(const RunConfig& c) {
    if (c.command == "select") {
        KVRETAIN_CHECK(c.k >= 1, "--k must be at least 1");
        KVRETAIN_CHECK(std::isfinite(c.lambda) && c.lambda >= 0.0, "--lambda must be finite and >= 0");
        KVRETAIN_CHECK(std::isfinite(c.epsilon) && c.epsilon > 0.0, "--epsilon must be positive");
    } else if (c.command == "simulate") {
        KVRETAIN_CHECK(c.prefill_len >= 1, "--prefill-len must be at least 1");
        KVRETAIN_CHECK(c.budget >= 1, "--budget must be at least 1");
        KVRETAIN_CHECK(std::isfinite(c.rel_tol) && c.rel_tol > 0.0, "--rel-tol must be positive");
    } else if (c.command == "analyze probe") {
        KVRETAIN_CHECK(c.tie_tol_pp >= 0.0, "--tie-tol must be non-negative");
        KVRETAIN_CHECK(c.records_path.empty() != c.table_path.empty(),
                       "analyze probe takes exactly one of --records or --table");
    } else if (c.command == "analyze confirm") {
        KVRETAIN_CHECK(c.n_boot >= 1, "--n-boot must be at least 1");
        KVRETAIN_CHECK(c.threads >= 1, "--threads must be at least 1");
        KVRETAIN_CHECK(c.family_alpha > 0.0 && c.family_alpha <= 1.0, "--family-alpha must be in (0, 1]");
    } else if (c.command == "decide") {
        KVRETAIN_CHECK(c.family_alpha > 0.0 && c.family_alpha <= 1.0, "--family-alpha must be in (0, 1]");
        KVRETAIN_CHECK(c.guard_alpha == "per-cell" || c.guard_alpha == "bonferroni",
                       "--guard-alpha must be 'per-cell' or 'bonferroni'");
    }
}

/// Writes to a sibling temp file, then renames over the target.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
    std::filesystem::path tmp = path;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot open '" + tmp.string() + "' for writing");
        }
        out << content;
        out.flush();
        if (!out) {
            throw IoError("write failed on '" + tmp.string() + "'");
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw IoError("cannot move output into place at '" + path.string() + "'");
    }
}

inline void emit(const std::string& path, const std::string& content, std::ostream& out) {
    if (path.empty() || path == "-") {
        out << content;
    } else {
        write_file_atomic(path, content);
    }
}

inline std::string dump(const nlohmann::json& j) { return j.dump(2) + "\n"; }

inline CadencePolicy parse_policy(const std::string& spec, std::size_t budget) {
    if (spec == "never") {
        return CadencePolicy::never(budget);
    }
    auto number = [&](const std::string& s) -> std::size_t {
        std::size_t pos = 0;
        unsigned long long v = 0;
        try {
            v = std::stoull(s, &pos);
        } catch (const std::exception&) {
            pos = 0;
        }
        if (s.empty() || pos != s.size() || s[0] == '-') {
            throw ValidationError("bad number '" + s + "' in policy '" + spec + "'");
        }
        return static_cast<std::size_t>(v);
    };
    if (spec.rfind("every:", 0) == 0) {
        return CadencePolicy::every_c_steps(number(spec.substr(6)), budget);
    }
    if (spec.rfind("at:", 0) == 0) {
        std::vector<std::size_t> steps;
        std::string rest = spec.substr(3);
        std::size_t start = 0;
        while (start <= rest.size()) {
            const auto comma = rest.find(',', start);
            const auto end = comma == std::string::npos ? rest.size() : comma;
            steps.push_back(number(rest.substr(start, end - start)));
            if (comma == std::string::npos) {
                break;
            }
            start = comma + 1;
        }
        return CadencePolicy::at(std::move(steps), budget);
    }
    throw ValidationError("unknown policy '" + spec + "'; expected never, every:C or at:S1,S2,...");
}

namespace detail {

inline nlohmann::json stats_json(const CacheStats& s) {
    return {{"mean_decode_cache", s.mean_decode_cache},
            {"peak_cache", s.peak_cache},
            {"end_of_prefill_cache", s.end_of_prefill_cache},
            {"decode_steps", s.decode_steps},
            {"decode_empty", s.decode_empty}};
}

inline nlohmann::json summary_json(const std::vector<LambdaSummary>& v) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& s : v) {
        arr.push_back({{"lambda", s.lambda},
                       {"mean_delta_pp", s.mean_delta_pp},
                       {"cells_used", s.cells_used},
                       {"missing_cells", s.missing_cells},
                       {"short_cells", s.short_cells}});
    }
    return arr;
}

using CellKey = std::pair<std::string, std::size_t>;

inline std::vector<ProblemOutcome> restrict_to_split(std::vector<ProblemOutcome> records,
                                                     const std::string& manifest_path, bool dev) {
    if (manifest_path.empty()) {
        return records;
    }
    const auto manifest = SplitManifest::from_json(load_json_file(manifest_path));
    const auto& ids = dev ? manifest.dev_ids : manifest.confirm_ids;
    const std::set<std::string> keep(ids.begin(), ids.end());
    std::erase_if(records, [&](const ProblemOutcome& r) { return !keep.count(r.problem_id); });
    return records;
}

inline bool same_lambda(const std::optional<double>& a, double b) {
    return a && std::abs(*a - b) <= 1e-12;
}

} // namespace detail

inline void run_select(const RunConfig& c, std::ostream& out) {
    const auto scores = tensor_to_scores(load_tensor(c.scores_path));
    const auto block = tensor_to_value_block(load_tensor(c.values_path));
    const auto sig = aggregate_signatures(block, c.epsilon);
    const auto kept = select(scores, sig, SelectionConfig{c.k, c.lambda});
    const nlohmann::json j = {{"schema", "kvretain.select/1"},
                              {"retained", kept.indices},
                              {"lambda", c.lambda},
                              {"k", c.k},
                              {"n", scores.size()},
                              {"epsilon", c.epsilon}};
    emit(c.out_path, dump(j), out);
}

inline void run_simulate(const RunConfig& c, std::ostream& out) {
    const auto policy = parse_policy(c.policy, c.budget);
    const auto trace = simulate_trajectory(c.prefill_len, c.decode_steps, policy);
    const auto stats = instrument(trace);
    nlohmann::json j = {{"schema", "kvretain.simulate/1"},
                        {"policy", policy.describe()},
                        {"budget", c.budget},
                        {"prefill_len", c.prefill_len},
                        {"decode_steps", c.decode_steps},
                        {"stats", detail::stats_json(stats)}};

    std::optional<DecodeTrace> other;
    if (!c.compare_policy.empty()) {
        const auto cmp = parse_policy(c.compare_policy, c.budget);
        other = simulate_trajectory(c.prefill_len, c.decode_steps, cmp);
        const auto other_stats = instrument(*other);
        const auto verdict = matched_mean_check(stats, other_stats, c.rel_tol);
        j["comparison"] = {{"policy", cmp.describe()},
                           {"stats", detail::stats_json(other_stats)},
                           {"matched", verdict.matched},
                           {"relative_gap", verdict.relative_gap},
                           {"rel_tol", c.rel_tol},
                           {"end_of_prefill_equal", verdict.end_of_prefill_equal},
                           {"end_of_prefill_false_positive", verdict.end_of_prefill_false_positive},
                           {"diagnostic", verdict.diagnostic}};
    }

    if (!c.csv_path.empty()) {
        std::string csv = other ? "step,length,compare_length\n" : "step,length\n";
        auto row = [&](std::size_t step, std::size_t len, std::size_t other_len) {
            csv += std::to_string(step) + "," + std::to_string(len);
            if (other) {
                csv += "," + std::to_string(other_len);
            }
            csv += "\n";
        };
        row(0, trace.end_of_prefill, other ? other->end_of_prefill : 0);
        for (std::size_t t = 0; t < trace.lengths.size(); ++t) {
            row(t + 1, trace.lengths[t], other ? other->lengths[t] : 0);
        }
        emit(c.csv_path, csv, out);
    }
    emit(c.out_path, dump(j), out);
}

inline void run_split(const RunConfig& c, std::ostream& out) {
    const auto ids = read_id_list(c.ids_path);
    const auto manifest = build_manifest(ids);
    std::string text;
    try {
        text = dump(manifest.to_json());
    } catch (const nlohmann::json::type_error& e) {
        throw SchemaError(std::string("id list is not valid UTF-8: ") + e.what());
    }
    emit(c.out_path, text, out);
}

/// Probe cells from raw records: each lambda arm is paired with the baseline
/// on the problems both arms contain.
inline ProbeTable probe_table_from_records(const std::vector<ProblemOutcome>& records,
                                           const std::string& baseline_method,
                                           const std::string& treatment_method) {
    std::map<detail::CellKey, std::vector<ProblemOutcome>> baseline;
    std::map<detail::CellKey, std::map<double, std::vector<ProblemOutcome>>> arms;
    for (const auto& r : records) {
        const detail::CellKey key{r.model, r.budget};
        if (r.method == baseline_method) {
            baseline[key].push_back(r);
        } else if (r.method == treatment_method) {
            KVRETAIN_CHECK(r.lambda.has_value(), "treatment record for '" + r.problem_id + "' has no lambda");
            arms[key][*r.lambda].push_back(r);
        }
    }
    ProbeTable table;
    for (const auto& [key, by_lambda] : arms) {
        auto base_it = baseline.find(key);
        KVRETAIN_CHECK(base_it != baseline.end(),
                       "no baseline records for " + key.first + " b=" + std::to_string(key.second));
        std::set<std::string> base_ids;
        for (const auto& r : base_it->second) {
            base_ids.insert(r.problem_id);
        }
        for (const auto& [lam, recs] : by_lambda) {
            std::set<std::string> common;
            for (const auto& r : recs) {
                if (base_ids.count(r.problem_id)) {
                    common.insert(r.problem_id);
                }
            }
            if (common.empty()) {
                continue;
            }
            auto pick = [&](const std::vector<ProblemOutcome>& src) {
                std::vector<ProblemOutcome> v;
                for (const auto& r : src) {
                    if (common.count(r.problem_id)) {
                        v.push_back(r);
                    }
                }
                return v;
            };
            const auto deltas = paired_deltas(pick(recs), pick(base_it->second));
            double sum = 0.0;
            for (const auto& d : deltas) {
                sum += d.delta;
            }
            table.cells.push_back({key.first, key.second, lam,
                                   100.0 * sum / static_cast<double>(deltas.size()), deltas.size(),
                                   base_ids.size()});
        }
    }
    KVRETAIN_CHECK(!table.cells.empty(), "no treatment records for method '" + treatment_method + "'");
    return table;
}

inline void run_probe(const RunConfig& c, std::ostream& out) {
    ProbeTable table;
    if (!c.table_path.empty()) {
        table = probe_from_json(load_json_file(c.table_path));
    } else {
        auto records = detail::restrict_to_split(load_outcomes(c.records_path), c.manifest_path, true);
        table = probe_table_from_records(records, c.baseline_method, c.treatment_method);
    }
    const auto sel = phase1_select(table, c.tie_tol_pp);
    const nlohmann::json j = {{"schema", "kvretain.probe_result/1"},
                              {"winner_lambda", sel.winner},
                              {"argmax_lambda", sel.argmax_lambda},
                              {"occam_applied", sel.occam_applied},
                              {"no_positive_mean", sel.no_positive_mean},
                              {"tie_tol_pp", c.tie_tol_pp},
                              {"means", detail::summary_json(sel.summaries)},
                              {"short_excluded", detail::summary_json(sel.short_excluded)},
                              {"ranking", sel.ranking},
                              {"short_excluded_ranking", sel.short_excluded_ranking},
                              {"warnings", sel.warnings},
                              {"table", probe_to_json(table)}};
    emit(c.out_path, dump(j), out);
}

/// Per-(model, budget) bootstrap contrasts of treatment minus baseline,
/// Bonferroni-marked across the family.
inline std::vector<CellResult> confirm_cells(const std::vector<ProblemOutcome>& records, const RunConfig& c) {
    std::map<detail::CellKey, std::pair<std::vector<ProblemOutcome>, std::vector<ProblemOutcome>>> cells;
    std::set<double> lambdas;
    for (const auto& r : records) {
        const detail::CellKey key{r.model, r.budget};
        if (r.method == c.treatment_method) {
            if (c.treatment_lambda && !detail::same_lambda(r.lambda, *c.treatment_lambda)) {
                continue;
            }
            if (r.lambda) {
                lambdas.insert(*r.lambda);
            }
            cells[key].first.push_back(r);
        } else if (r.method == c.baseline_method) {
            cells[key].second.push_back(r);
        }
    }
    KVRETAIN_CHECK(lambdas.size() <= 1, "treatment records mix several lambda values; pass --lambda");
    KVRETAIN_CHECK(!cells.empty(), "no records for the requested methods");

    std::vector<CellResult> out;
    for (const auto& [key, arms] : cells) {
        const std::string label = key.first + " b=" + std::to_string(key.second);
        KVRETAIN_CHECK(!arms.first.empty(), "cell " + label + " has no treatment records");
        KVRETAIN_CHECK(!arms.second.empty(), "cell " + label + " has no baseline records");
        const auto deltas = delta_values(paired_deltas(arms.first, arms.second));
        const auto boot = cluster_bootstrap(deltas, {c.n_boot, c.rng_seed, c.threads});
        CellResult cell;
        cell.model = key.first;
        cell.budget = key.second;
        cell.delta_pp = boot.point_pp;
        cell.ci_lo_pp = boot.ci_lo_pp;
        cell.ci_hi_pp = boot.ci_hi_pp;
        cell.p = boot.p_two_sided;
        cell.n_problems = boot.n_problems;
        out.push_back(cell);
    }
    return bonferroni_evaluate(std::move(out), c.family_alpha);
}

inline void run_confirm(const RunConfig& c, std::ostream& out) {
    auto records = detail::restrict_to_split(load_outcomes(c.records_path), c.manifest_path, false);
    const auto cells = confirm_cells(records, c);
    nlohmann::json j = cells_to_json(cells, c.family_alpha);
    j["n_boot"] = c.n_boot;
    j["rng_seed"] = c.rng_seed;
    j["baseline_method"] = c.baseline_method;
    j["treatment_method"] = c.treatment_method;
    j["lambda"] = c.treatment_lambda ? nlohmann::json(*c.treatment_lambda) : nlohmann::json(nullptr);
    if (!c.plot_data_path.empty()) {
        emit(c.plot_data_path, forest_plot_csv(cells), out);
    }
    emit(c.out_path, dump(j), out);
}

inline void run_decide(const RunConfig& c, std::ostream& out) {
    const auto cells = bonferroni_evaluate(cells_from_json(load_json_file(c.cells_path)), c.family_alpha);
    BranchRule rule;
    rule.primary_family = c.primary_family;
    rule.transfer_family = c.transfer_family;
    rule.family_alpha = c.family_alpha;
    rule.guard = c.guard_alpha == "bonferroni" ? GuardAlpha::Bonferroni : GuardAlpha::PerCell;
    const auto v = branch_decide(cells, rule);

    auto cell_list = [](const std::vector<CellResult>& v) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& cell : v) {
            arr.push_back(cell_to_json(cell));
        }
        return arr;
    };
    nlohmann::json j = cells_to_json(cells, c.family_alpha);
    j["schema"] = "kvretain.decision/1";
    j["branch"] = to_string(c.symmetric_guard ? v.symmetric_guard_branch : v.branch);
    j["guard"] = c.symmetric_guard ? "symmetric" : "registered";
    j["registered_branch"] = to_string(v.branch);
    j["symmetric_guard_branch"] = to_string(v.symmetric_guard_branch);
    j["guard_alpha"] = v.guard_alpha;
    j[c.primary_family + "_qualifying_cells"] = cell_list(v.primary_qualifying_cells);
    j[c.transfer_family + "_mean_delta_pp"] = v.transfer_mean_delta_pp;
    j["negative_guard_violations"] = cell_list(v.negative_guard_violations);
    j["symmetric_guard_violations"] = cell_list(v.symmetric_guard_violations);
    if (!c.plot_data_path.empty()) {
        emit(c.plot_data_path, forest_plot_csv(cells), out);
    }
    emit(c.out_path, dump(j), out);
}

inline void run(const RunConfig& c, std::ostream& out) {
    validate(c);
    if (c.command == "select") {
        run_select(c, out);
    } else if (c.command == "simulate") {
        run_simulate(c, out);
    } else if (c.command == "split") {
        run_split(c, out);
    } else if (c.command == "analyze probe") {
        run_probe(c, out);
    } else if (c.command == "analyze confirm") {
        run_confirm(c, out);
    } else if (c.command == "decide") {
        run_decide(c, out);
    } else {
        throw Error(ErrorKind::Usage, "unknown command '" + c.command + "'");
    }
}

inline std::string error_record(ErrorKind kind, const std::string& message) {
    nlohmann::json j = {{"error", {{"kind", to_string(kind)}, {"code", static_cast<int>(kind)}, {"message", message}}}};
    return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) + "\n";
}

/// Parses argv, runs one subcommand and returns the process exit code.
/// Failures print one JSON error record on `err`.
inline int main_entry(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    RunConfig c;
    CLI::App app{"KV-cache retention selection, cache accounting and evaluation protocol"};
    app.name("kvretain");
    app.require_subcommand(1);

    auto* sel = app.add_subcommand("select", "run one retention selection event");
    sel->add_option("--scores", c.scores_path, "score tensor (rank 1)")->required();
    sel->add_option("--values", c.values_path, "value tensor [n, L, H, d]")->required();
    sel->add_option("--k", c.k, "budget")->required();
    sel->add_option("--lambda", c.lambda, "redundancy weight")->required();
    sel->add_option("--epsilon", c.epsilon, "signature norm floor");
    sel->add_option("--out", c.out_path, "output JSON (default stdout)");

    auto* sim = app.add_subcommand("simulate", "simulate decode-time cache lengths");
    sim->add_option("--prefill-len", c.prefill_len)->required();
    sim->add_option("--decode-steps", c.decode_steps)->required();
    sim->add_option("--budget", c.budget)->required();
    sim->add_option("--policy", c.policy, "never | every:C | at:S1,S2,...");
    sim->add_option("--compare-policy", c.compare_policy, "second policy for a matched-mean check");
    sim->add_option("--rel-tol", c.rel_tol, "matched-mean relative tolerance");
    sim->add_option("--csv", c.csv_path, "trajectory CSV (step,length)");
    sim->add_option("--out", c.out_path, "stats JSON (default stdout)");

    auto* spl = app.add_subcommand("split", "MD5-bucketed dev/confirm split");
    spl->add_option("--ids", c.ids_path, "one id per line")->required();
    spl->add_option("--out", c.out_path, "manifest JSON (default stdout)");

    auto* ana = app.add_subcommand("analyze", "probe and confirmation analyses");
    ana->require_subcommand(1);
    auto* probe = ana->add_subcommand("probe", "Phase-1 lambda selection");
    probe->add_option("--records", c.records_path, "outcome JSONL");
    probe->add_option("--table", c.table_path, "precomputed probe table JSON");
    probe->add_option("--manifest", c.manifest_path, "restrict records to the dev split");
    probe->add_option("--baseline-method", c.baseline_method);
    probe->add_option("--treatment-method", c.treatment_method);
    probe->add_option("--tie-tol", c.tie_tol_pp, "Occam tie tolerance (pp)");
    probe->add_option("--out", c.out_path);

    auto* conf = ana->add_subcommand("confirm", "cluster bootstrap per cell with Bonferroni");
    conf->add_option("--records", c.records_path, "outcome JSONL")->required();
    conf->add_option("--manifest", c.manifest_path, "restrict records to the confirm split");
    conf->add_option("--baseline-method", c.baseline_method);
    conf->add_option("--treatment-method", c.treatment_method);
    conf->add_option("--lambda", c.treatment_lambda, "treatment lambda to keep");
    conf->add_option("--n-boot", c.n_boot);
    conf->add_option("--rng-seed", c.rng_seed);
    conf->add_option("--threads", c.threads);
    conf->add_option("--family-alpha", c.family_alpha);
    conf->add_option("--emit-plot-data", c.plot_data_path, "forest-plot CSV");
    conf->add_option("--out", c.out_path);

    auto* dec = app.add_subcommand("decide", "Branch A/B/C decision");
    dec->add_option("--cells", c.cells_path, "cell results JSON")->required();
    dec->add_flag("--symmetric-guard", c.symmetric_guard, "negative guard over both models");
    dec->add_option("--primary-family", c.primary_family);
    dec->add_option("--transfer-family", c.transfer_family);
    dec->add_option("--guard-alpha", c.guard_alpha, "per-cell | bonferroni");
    dec->add_option("--family-alpha", c.family_alpha);
    dec->add_option("--emit-plot-data", c.plot_data_path, "forest-plot CSV");
    dec->add_option("--out", c.out_path);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << error_record(ErrorKind::Usage, e.what());
        return static_cast<int>(ErrorKind::Usage);
    }

    if (sel->parsed()) {
        c.command = "select";
    } else if (sim->parsed()) {
        c.command = "simulate";
    } else if (spl->parsed()) {
        c.command = "split";
    } else if (probe->parsed()) {
        c.command = "analyze probe";
    } else if (conf->parsed()) {
        c.command = "analyze confirm";
    } else if (dec->parsed()) {
        c.command = "decide";
    }

    try {
        run(c, out);
    } catch (const Error& e) {
        err << error_record(e.kind(), e.what());
        return static_cast<int>(e.kind());
    } catch (const std::exception& e) {
        err << error_record(ErrorKind::Internal, e.what());
        return static_cast<int>(ErrorKind::Internal);
    }
    return 0;
}

} // namespace kvretain::cli

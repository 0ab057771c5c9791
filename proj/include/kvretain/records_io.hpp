// Copyright (C) 2026 The kvretain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kvretain/error.hpp"
#include "kvretain/stats_engine.hpp"
#include "kvretain/tensor_io.hpp"

namespace kvretain {

inline constexpr const char* kCellsSchema = "kvretain.cells/1";
inline constexpr const char* kProbeSchema = "kvretain.probe/1";

namespace detail {

inline const std::set<std::string>& outcome_fields() {
    static const std::set<std::string> fields = {
        "problem_id", "model", "budget",    "method",     "lambda",
        "seed",       "correct", "extracted", "mean_cache", "peak_cache"};
    return fields;
}

template <typename T>
T require_field(const nlohmann::json& j, const char* name, const std::string& where) {
    auto it = j.find(name);
    if (it == j.end()) {
        throw SchemaError(where + ": missing field '" + name + "'");
    }
    try {
        return it->get<T>();
    } catch (const nlohmann::json::exception&) {
        throw SchemaError(where + ": field '" + name + "' has the wrong type");
    }
}

inline std::size_t require_count(const nlohmann::json& j, const char* name, const std::string& where) {
    auto it = j.find(name);
    if (it == j.end()) {
        throw SchemaError(where + ": missing field '" + name + "'");
    }
    if (!it->is_number_integer() || it->get<std::int64_t>() < 0) {
        throw SchemaError(where + ": field '" + name + "' must be a non-negative integer");
    }
    return it->get<std::size_t>();
}

} // namespace detail

inline ProblemOutcome outcome_from_json(const nlohmann::json& j, const std::string& where = "record") {
    if (!j.is_object()) {
        throw SchemaError(where + ": expected a JSON object");
    }
    ProblemOutcome r;
    r.problem_id = detail::require_field<std::string>(j, "problem_id", where);
    r.model = detail::require_field<std::string>(j, "model", where);
    r.budget = detail::require_count(j, "budget", where);
    r.method = detail::require_field<std::string>(j, "method", where);
    if (auto it = j.find("lambda"); it != j.end() && !it->is_null()) {
        if (!it->is_number()) {
            throw SchemaError(where + ": field 'lambda' must be a number or null");
        }
        r.lambda = it->get<double>();
    }
    r.seed = detail::require_field<std::int64_t>(j, "seed", where);
    r.correct = detail::require_field<bool>(j, "correct", where);
    r.extracted = detail::require_field<bool>(j, "extracted", where);
    r.mean_cache = detail::require_field<double>(j, "mean_cache", where);
    r.peak_cache = detail::require_count(j, "peak_cache", where);
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!detail::outcome_fields().count(it.key())) {
            r.extra[it.key()] = it.value();
        }
    }
    return r;
}

inline nlohmann::json outcome_to_json(const ProblemOutcome& r) {
    nlohmann::json j = r.extra.is_object() ? r.extra : nlohmann::json::object();
    j["problem_id"] = r.problem_id;
    j["model"] = r.model;
    j["budget"] = r.budget;
    j["method"] = r.method;
    j["lambda"] = r.lambda ? nlohmann::json(*r.lambda) : nlohmann::json(nullptr);
    j["seed"] = r.seed;
    j["correct"] = r.correct;
    j["extracted"] = r.extracted;
    j["mean_cache"] = r.mean_cache;
    j["peak_cache"] = r.peak_cache;
    return j;
}

/// Parses JSONL; blank lines are skipped. Rejects duplicate
/// (problem_id, model, budget, method, lambda, seed) keys.
inline std::vector<ProblemOutcome> parse_outcomes_jsonl(std::istream& in, const std::string& source) {
    std::vector<ProblemOutcome> out;
    std::set<ProblemOutcome::Key> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        const std::string where = source + ":" + std::to_string(line_no);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw SchemaError(where + ": " + e.what());
        }
        out.push_back(outcome_from_json(j, where));
        if (!seen.insert(out.back().key()).second) {
            throw ValidationError(where + ": duplicate record for problem '" + out.back().problem_id + "'");
        }
    }
    return out;
}

inline std::vector<ProblemOutcome> load_outcomes(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open '" + path.string() + "' for reading");
    }
    return parse_outcomes_jsonl(in, path.string());
}

inline std::string outcomes_to_jsonl(const std::vector<ProblemOutcome>& records) {
    std::string out;
    for (const auto& r : records) {
        out += outcome_to_json(r).dump();
        out.push_back('\n');
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cell results

inline nlohmann::json cell_to_json(const CellResult& c) {
    return {{"model", c.model},
            {"budget", c.budget},
            {"delta_pp", c.delta_pp},
            {"ci95", {c.ci_lo_pp, c.ci_hi_pp}},
            {"p", c.p},
            {"bonferroni_pass", c.bonferroni_pass},
            {"n_problems", c.n_problems}};
}

inline CellResult cell_from_json(const nlohmann::json& j, const std::string& where) {
    if (!j.is_object()) {
        throw SchemaError(where + ": expected a JSON object");
    }
    CellResult c;
    c.model = detail::require_field<std::string>(j, "model", where);
    c.budget = detail::require_count(j, "budget", where);
    c.delta_pp = detail::require_field<double>(j, "delta_pp", where);
    const auto ci = detail::require_field<std::vector<double>>(j, "ci95", where);
    if (ci.size() != 2) {
        throw SchemaError(where + ": 'ci95' must hold exactly two numbers");
    }
    c.ci_lo_pp = ci[0];
    c.ci_hi_pp = ci[1];
    c.p = detail::require_field<double>(j, "p", where);
    if (auto it = j.find("bonferroni_pass"); it != j.end() && it->is_boolean()) {
        c.bonferroni_pass = it->get<bool>();
    }
    if (auto it = j.find("n_problems"); it != j.end() && it->is_number_unsigned()) {
        c.n_problems = it->get<std::size_t>();
    }
    return c;
}

/// Accepts {"cells": [...]} or a bare array of cell objects.
inline std::vector<CellResult> cells_from_json(const nlohmann::json& j) {
    const nlohmann::json* arr = &j;
    if (j.is_object()) {
        auto it = j.find("cells");
        if (it == j.end()) {
            throw SchemaError("cells file has no 'cells' array");
        }
        arr = &*it;
    }
    if (!arr->is_array()) {
        throw SchemaError("'cells' must be an array");
    }
    std::vector<CellResult> cells;
    for (std::size_t i = 0; i < arr->size(); ++i) {
        cells.push_back(cell_from_json((*arr)[i], "cells[" + std::to_string(i) + "]"));
    }
    return cells;
}

inline nlohmann::json cells_to_json(const std::vector<CellResult>& cells, double family_alpha) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& c : cells) {
        arr.push_back(cell_to_json(c));
    }
    return {{"schema", kCellsSchema},
            {"family_alpha", family_alpha},
            {"bonferroni_threshold", bonferroni_threshold(cells.size(), family_alpha)},
            {"cells", arr}};
}

/// Forest-plot rows: cell label, point estimate, CI, p, Bonferroni pass.
inline std::string forest_plot_csv(const std::vector<CellResult>& cells) {
    std::string out = "cell,delta_pp,ci_lo,ci_hi,p,pass\n";
    char buf[256];
    for (const auto& c : cells) {
        std::snprintf(buf, sizeof buf, "%s,%.4f,%.4f,%.4f,%.6g,%s\n", c.label().c_str(), c.delta_pp,
                      c.ci_lo_pp, c.ci_hi_pp, c.p, c.bonferroni_pass ? "true" : "false");
        out += buf;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Probe tables

inline ProbeTable probe_from_json(const nlohmann::json& j) {
    const nlohmann::json* arr = &j;
    if (j.is_object()) {
        auto it = j.find("cells");
        if (it == j.end()) {
            throw SchemaError("probe file has no 'cells' array");
        }
        arr = &*it;
    }
    if (!arr->is_array()) {
        throw SchemaError("probe 'cells' must be an array");
    }
    ProbeTable t;
    for (std::size_t i = 0; i < arr->size(); ++i) {
        const auto& e = (*arr)[i];
        const std::string where = "cells[" + std::to_string(i) + "]";
        if (!e.is_object()) {
            throw SchemaError(where + ": expected a JSON object");
        }
        ProbeCell c;
        c.model = detail::require_field<std::string>(e, "model", where);
        c.budget = detail::require_count(e, "budget", where);
        c.lambda = detail::require_field<double>(e, "lambda", where);
        c.delta_pp = detail::require_field<double>(e, "delta_pp", where);
        c.n = detail::require_count(e, "n", where);
        if (e.contains("reference_n")) {
            c.reference_n = detail::require_count(e, "reference_n", where);
        }
        t.cells.push_back(std::move(c));
    }
    return t;
}

inline nlohmann::json probe_to_json(const ProbeTable& t) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& c : t.cells) {
        arr.push_back({{"model", c.model},
                       {"budget", c.budget},
                       {"lambda", c.lambda},
                       {"delta_pp", c.delta_pp},
                       {"n", c.n},
                       {"reference_n", c.reference_n}});
    }
    return {{"schema", kProbeSchema}, {"cells", arr}};
}

inline nlohmann::json load_json_file(const std::filesystem::path& path) {
    const std::string bytes = read_file_bytes(path);
    try {
        return nlohmann::json::parse(bytes);
    } catch (const nlohmann::json::parse_error& e) {
        throw SchemaError("'" + path.string() + "' is not valid JSON: " + e.what());
    }
}

} // namespace kvretain

// Copyright (C) 2026 The MiniCache Engine Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// The work behind each CLI subcommand, kept free of argument parsing and file
// handling so it can be tested in-process. JSON objects use sorted keys and
// CSV columns have a fixed order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "minicache/cache_engine.hpp"
#include "minicache/io.hpp"
#include "minicache/memory_model.hpp"
#include "minicache/run_config.hpp"
#include "minicache/sim_decoder.hpp"

namespace minicache {

using json = nlohmann::json;

namespace detail {

inline std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string fmt_float(float v) { return shortest(v); }

// The double nearest to the float's shortest decimal, so 0.6f prints as 0.6.
inline double json_float(float v) { return std::strtod(shortest(v).c_str(), nullptr); }

// Nearest-rank percentile.
inline float percentile(std::vector<float> v, double p) {
    if (v.empty()) return 0.0f;
    std::sort(v.begin(), v.end());
    const auto rank = static_cast<std::size_t>(std::ceil(p * static_cast<double>(v.size())));
    return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

} // namespace detail

/// pair_index,role,mean_distance,p95_distance for every adjacent layer pair.
inline std::string analyze_csv(const KvDump& dump) {
    const AdjacentSimilarity sim = adjacent_similarity(dump);
    std::string out = "pair_index,role,mean_distance,p95_distance\n";
    for (std::size_t l = 0; l + 1 < dump.layers.size(); ++l) {
        for (Role role : {Role::Key, Role::Value}) {
            const double mean = role == Role::Key ? sim.key[l] : sim.value[l];
            const float p95 = detail::percentile(pair_distances(dump, l, role), 0.95);
            out += std::to_string(l) + "," + to_string(role) + "," + detail::fmt_double(mean) + "," +
                   detail::fmt_float(p95) + "\n";
        }
    }
    return out;
}

/// Per-token distance histogram over [0, 1] in equal-width bins.
inline std::string histogram_csv(const KvDump& dump, std::size_t bins = 20) {
    validate_dump(dump);
    std::string out = "pair_index,role,bin_lower,bin_upper,count\n";
    for (std::size_t l = 0; l + 1 < dump.layers.size(); ++l) {
        for (Role role : {Role::Key, Role::Value}) {
            std::vector<std::size_t> counts(bins, 0);
            for (float d : pair_distances(dump, l, role)) {
                const auto b = static_cast<std::size_t>(std::clamp(d, 0.0f, 1.0f) * static_cast<float>(bins));
                ++counts[std::min(b, bins - 1)];
            }
            for (std::size_t b = 0; b < bins; ++b) {
                out += std::to_string(l) + "," + to_string(role) + "," +
                       detail::fmt_double(static_cast<double>(b) / bins) + "," +
                       detail::fmt_double(static_cast<double>(b + 1) / bins) + "," + std::to_string(counts[b]) + "\n";
            }
        }
    }
    return out;
}

inline json to_json(const RunConfig& c) {
    json j;
    j["t"] = detail::json_float(c.t);
    j["gamma"] = detail::json_float(c.gamma);
    j["eps_parallel"] = detail::json_float(c.eps_parallel);
    j["mode"] = to_string(c.mode);
    j["inclusive"] = c.inclusive;
    j["merge"] = to_string(c.merge);
    j["start_layer"] = c.start_layer ? json(*c.start_layer) : json(nullptr);
    j["bits"] = c.bits;
    j["group_size"] = c.group_size;
    return j;
}

inline json to_json(const MemoryReport& r) {
    json j;
    j["full_cache"] = r.full_cache;
    j["merged_only"] = r.merged_only;
    j["restoration_overhead"] = r.restoration_overhead;
    j["total"] = r.total;
    j["compression_ratio"] = r.compression_ratio;
    j["scalars"] = {{"full", r.scalars.full},
                    {"standard", r.scalars.standard},
                    {"directions", r.scalars.directions},
                    {"direction_scales", r.scalars.direction_scales},
                    {"magnitudes", r.scalars.magnitudes},
                    {"retained", r.scalars.retained}};
    return j;
}

inline json to_json(const Reconciliation& rec) {
    json items = json::array();
    for (const auto& it : rec.items) {
        items.push_back({{"name", it.name},
                         {"analytic", it.analytic},
                         {"measured", it.measured},
                         {"delta", it.delta},
                         {"note", it.note}});
    }
    return {{"items", items},
            {"analytic_total", rec.analytic_total},
            {"measured_total", rec.measured_total},
            {"delta", rec.delta},
            {"unexplained", rec.unexplained},
            {"index_entries", rec.index_entries}};
}

inline json to_json(const StorageBreakdown& b) {
    return {{"standard", b.standard},
            {"directions", b.directions},
            {"direction_codes", b.direction_codes},
            {"direction_scales", b.direction_scales},
            {"magnitudes", b.magnitudes},
            {"omegas", b.omegas},
            {"retained", b.retained},
            {"pending", b.pending},
            {"index_entries", b.index_entries},
            {"unpaired_tail", b.unpaired_tail},
            {"code_bits", b.code_bits},
            {"f32_total", b.f32_total()}};
}

inline json to_json(const DivergenceReport& r) {
    return {{"max_abs_diff", r.max_abs_diff},
            {"cosine", r.cosine},
            {"worst_abs_diff", r.worst_abs_diff()},
            {"adjacent_similarity", {{"key", r.similarity.key}, {"value", r.similarity.value}}}};
}

struct CompressResult {
    std::vector<std::uint8_t> archive;
    json stats;
};

/// Prefill-compresses every sequence of the dump.
inline CompressResult compress(const KvDump& dump, const RunConfig& rc) {
    validate_dump(dump);
    const EngineConfig cfg = rc.engine(dump.dims.layers);
    std::vector<LayeredKvCache> caches;
    const std::vector<KvDump> seqs = split_batch(dump);
    std::vector<double> layer_sq(dump.dims.layers, 0.0);
    std::size_t stored = 0;
    json reconciles = json::array();

    MemoryInputs mi;
    mi.batch = 1;
    mi.layers = dump.dims.layers;
    mi.hidden = dump.dims.hidden;
    mi.input_len = dump.dims.tokens;
    mi.output_len = 0;
    mi.gamma = rc.gamma;
    mi.bytes_per_scalar = 4;
    mi.quant = cfg.quant;

    for (const KvDump& seq : seqs) {
        LayeredKvCache cache = prefill(seq, cfg);
        const auto errs = restoration_errors(seq, cache);
        for (std::size_t l = 0; l < errs.size(); ++l) layer_sq[l] += errs[l] * errs[l];
        stored += stored_element_count(cache);
        if (dump.dims.tokens > 0) reconciles.push_back(to_json(reconcile(mi, cache)));
        caches.push_back(std::move(cache));
    }

    json per_layer = json::array();
    double total_sq = 0.0;
    for (double sq : layer_sq) {
        per_layer.push_back(std::sqrt(sq));
        total_sq += sq;
    }
    CompressResult out;
    out.archive = encode_archive(caches);
    json& s = out.stats;
    s["config"] = to_json(rc);
    s["dims"] = {{"batch", dump.dims.batch},
                 {"layers", dump.dims.layers},
                 {"tokens", dump.dims.tokens},
                 {"hidden", dump.dims.hidden}};
    s["start_layer"] = cfg.start_layer;
    s["merged_pairs"] = caches.front().merged_pair_count();
    s["stored_element_count"] = stored;
    s["full_element_count"] = 2ull * dump.dims.batch * dump.dims.layers * dump.dims.tokens * dump.dims.hidden;
    s["storage"] = to_json(storage_breakdown(caches.front()));
    s["archive_bytes"] = out.archive.size();
    if (dump.dims.tokens > 0) {
        MemoryInputs batch_mi = mi;
        batch_mi.batch = dump.dims.batch;
        s["analytic"] = to_json(analytic_memory(batch_mi));
    }
    s["reconcile"] = reconciles;
    s["restoration_error"] = {{"per_layer", per_layer}, {"total", std::sqrt(total_sq)}};
    return out;
}

inline Matrix random_prompt(std::uint64_t seed, std::size_t tokens, std::size_t hidden) {
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix m(tokens, hidden);
    for (float& x : m.data()) x = static_cast<float>(normal(rng));
    return m;
}

struct SimulationResult {
    KvDump dump;
    json report;
};

/// Full cache against MiniCache with each merge function, all decoding from
/// the same prefill.
inline SimulationResult simulate(const RunConfig& rc) {
    const SimModel model(SimModelConfig{rc.layers, rc.hidden, rc.seed, rc.tied_pairs});
    const PrefillOutput pre = run_prefill(model, random_prompt(rc.seed, rc.prompt_len, rc.hidden));

    EngineConfig full_cfg = rc.engine(rc.layers);
    full_cfg.start_layer = rc.layers;
    LayeredKvCache full = prefill(pre.dump, full_cfg);
    const auto reference = run_decode(model, full, pre.next_input, rc.steps);

    SimulationResult out;
    json& r = out.report;
    r["config"] = to_json(rc);
    r["model"] = {{"layers", rc.layers},
                  {"hidden", rc.hidden},
                  {"seed", rc.seed},
                  {"prompt_len", rc.prompt_len},
                  {"steps", rc.steps},
                  {"tied_pairs", rc.tied_pairs}};
    r["variants"]["full"] = to_json(compare_traces(reference, reference, pre.dump));
    for (MergeFn fn : {MergeFn::Slerp, MergeFn::Mean, MergeFn::MaxNorm}) {
        EngineConfig cfg = rc.engine(rc.layers);
        cfg.merge_fn = fn;
        LayeredKvCache cache = prefill(pre.dump, cfg);
        const auto trace = run_decode(model, cache, pre.next_input, rc.steps);
        json v = to_json(compare_traces(reference, trace, pre.dump));
        v["restoration_error_after_prefill"] = total_restoration_error(pre.dump, prefill(pre.dump, cfg));
        r["variants"][std::string("minicache-") + to_string(fn)] = v;
    }
    out.dump = pre.dump;
    return out;
}

/// t,gamma,restoration_error over the grid (t outer, gamma inner).
inline std::string ablate_csv(const KvDump& dump, const RunConfig& rc) {
    validate_dump(dump);
    const std::vector<KvDump> seqs = split_batch(dump);
    std::string out = "t,gamma,restoration_error\n";
    for (float t : rc.t_grid) {
        for (float g : rc.gamma_grid) {
            RunConfig point = rc;
            point.t = t;
            point.gamma = g;
            const EngineConfig cfg = point.engine(dump.dims.layers);
            double sq = 0.0;
            for (const KvDump& seq : seqs) {
                const double e = total_restoration_error(seq, prefill(seq, cfg));
                sq += e * e;
            }
            out += detail::fmt_float(t) + "," + detail::fmt_float(g) + "," + detail::fmt_double(std::sqrt(sq)) + "\n";
        }
    }
    return out;
}

inline json memory_json(const MemoryInputs& mi) {
    json j = to_json(analytic_memory(mi));
    j["inputs"] = {{"b", mi.batch},
                   {"r", mi.layers},
                   {"h", mi.hidden},
                   {"s", mi.input_len},
                   {"n", mi.output_len},
                   {"gamma", mi.gamma},
                   {"bytes_per_scalar", mi.bytes_per_scalar},
                   {"bits", mi.quant ? mi.quant->bits : 0}};
    return j;
}

} // namespace minicache

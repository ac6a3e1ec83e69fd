// Copyright (C) 2026 The MiniCache Engine Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Analytical KV-cache footprint of cross-layer merging with S = r/2, and its
// reconciliation against what a live cache actually stores.
//
// Everything is counted in scalars first and converted to bytes with a single
// bytes_per_scalar factor. With bytes_per_scalar = 2 (FP16) the terms read
//   full     4 b r h (s+n)
//   merged   3 b r h (s+n)
//   norms    2 b r (s+n)
//   retained 2 gamma b r h (s+n)
// and the total is b r (s+n) (3h + 2 + 2 gamma h).

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "minicache/cache_engine.hpp"
#include "minicache/error.hpp"
#include "minicache/quantizer.hpp"

namespace minicache {

struct MemoryInputs {
    double batch = 1;
    double layers = 32;
    double hidden = 4096;
    double input_len = 128;
    double output_len = 128;
    double gamma = 0.05;
    double bytes_per_scalar = 2;
    // Directions stored as RTN codes plus one f32-width scale per group.
    std::optional<QuantConfig> quant;

    double tokens() const noexcept { return input_len + output_len; }

    void validate() const {
        if (!(batch > 0 && layers > 0 && hidden > 0 && tokens() > 0 && bytes_per_scalar > 0)) {
            throw Error(ErrorCode::InvalidConfig, "memory inputs must be positive");
        }
        if (!(gamma >= 0.0 && gamma <= 1.0)) throw Error(ErrorCode::InvalidConfig, "gamma must lie in [0, 1]");
        if (quant) quant->validate();
    }
};

/// Per-category scalar counts of the analytical model.
struct MemoryTerms {
    double full = 0;
    double standard = 0;
    double directions = 0;
    double direction_scales = 0;
    double magnitudes = 0;
    double retained = 0;
};

struct MemoryReport {
    MemoryTerms scalars;
    // Bytes.
    double full_cache = 0;
    double merged_only = 0;
    double restoration_overhead = 0;
    double total = 0;
    double compression_ratio = 0;
};

inline MemoryReport analytic_memory(const MemoryInputs& mi) {
    mi.validate();
    const double brn = mi.batch * mi.layers * mi.tokens();
    const double h = mi.hidden;
    MemoryTerms t;
    t.full = 2.0 * brn * h;
    // Layers [0, r/2) keep both roles.
    t.standard = brn * h;
    // r/4 pairs, two roles, one shared direction row each.
    t.directions = 0.5 * brn * h;
    if (mi.quant) {
        t.directions *= mi.quant->bits / (8.0 * mi.bytes_per_scalar);
        t.direction_scales = 0.5 * brn * static_cast<double>(mi.quant->groups(static_cast<std::size_t>(h)));
    }
    // Four norm vectors per pair.
    t.magnitudes = brn;
    // gamma of the tokens in each pair keep four verbatim rows.
    t.retained = mi.gamma * brn * h;

    MemoryReport r;
    r.scalars = t;
    const double bps = mi.bytes_per_scalar;
    r.full_cache = t.full * bps;
    r.merged_only = (t.standard + t.directions + t.direction_scales) * bps;
    r.restoration_overhead = (t.magnitudes + t.retained) * bps;
    r.total = r.merged_only + r.restoration_overhead;
    r.compression_ratio = r.full_cache / r.total;
    return r;
}

struct ReconcileItem {
    std::string name;
    double analytic = 0;
    double measured = 0;
    double delta = 0;
    std::string note;
};

/// Measured-vs-analytic scalar counts. A "scalar" is bytes_per_scalar bytes;
/// quantized codes count as bits / (8 * bytes_per_scalar) scalars each.
struct Reconciliation {
    std::vector<ReconcileItem> items;
    double analytic_total = 0;
    double measured_total = 0;
    double delta = 0;
    double unexplained = 0;
    // Stored retention indices (integers, outside the scalar totals).
    std::size_t index_entries = 0;
};

inline Reconciliation reconcile(const MemoryInputs& mi, const LayeredKvCache& cache) {
    mi.validate();
    if (mi.batch != 1 || mi.layers != static_cast<double>(cache.num_layers()) ||
        mi.hidden != static_cast<double>(cache.hidden()) ||
        mi.tokens() != static_cast<double>(detail::cache_token_count(cache))) {
        throw Error(ErrorCode::DimsMismatch, "memory inputs do not describe this cache (b=1, r, h, s+n)");
    }
    const MemoryReport model = analytic_memory(mi);
    const MemoryTerms& a = model.scalars;
    const StorageBreakdown m = storage_breakdown(cache);
    const double code_scalars =
        m.code_bits == 0 ? 0.0 : static_cast<double>(m.direction_codes) * m.code_bits / (8.0 * mi.bytes_per_scalar);

    Reconciliation rec;
    auto add = [&](std::string name, double analytic, double measured, std::string note) {
        rec.items.push_back({std::move(name), analytic, measured, measured - analytic, std::move(note)});
    };
    const double paired_standard = static_cast<double>(m.standard - m.unpaired_tail);
    add("standard_layers", a.standard, paired_standard,
        "layers below the start layer; the model assumes exactly r/2 of them");
    add("unpaired_tail", 0.0, static_cast<double>(m.unpaired_tail),
        "layers at or above the start layer left without a partner");
    add("merged_directions", a.directions, static_cast<double>(m.directions) + code_scalars,
        "shared direction rows, one per token per role per pair");
    add("direction_scales", a.direction_scales, static_cast<double>(m.direction_scales),
        "per-group quantization scales");
    add("magnitudes", a.magnitudes, static_cast<double>(m.magnitudes),
        "four norm vectors per pair; the baselines store none");
    add("retained_rows", a.retained, static_cast<double>(m.retained),
        "verbatim rows for the union of key and value retention sets, four per index");
    add("omegas", 0.0, static_cast<double>(m.omegas), "per-token angles, absent from the analytical model");
    add("pending", 0.0, static_cast<double>(m.pending), "decode token waiting for its pair partner");

    rec.analytic_total = model.total / mi.bytes_per_scalar;
    rec.measured_total = static_cast<double>(stored_element_count(cache)) + code_scalars;
    rec.delta = rec.measured_total - rec.analytic_total;
    // The analytic side is itemized term by term from the model, so any
    // residue can only come from stored elements no item accounts for. The
    // measured counts are exact in double, unlike the summed deltas.
    double attributed = 0.0;
    for (const auto& item : rec.items) attributed += item.measured;
    rec.unexplained = rec.measured_total - attributed;
    rec.index_entries = m.index_entries;
    return rec;
}

} // namespace minicache

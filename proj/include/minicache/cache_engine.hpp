// Copyright (C) 2026 The MiniCache Engine Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Layered KV cache with cross-layer merging.
//
// Layers below the start layer S keep a standard cache. From S upward every
// odd layer l merges with l - 1: the pair's shared directions, per-layer
// norms, angles and retained rows live in slot l, and slot l - 1 only refers
// to it. Decoding runs in two rounds per pair: the even layer restores its
// states from the shared record and parks its new token, the odd layer
// restores its own states and then merges both new tokens into the record.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "minicache/error.hpp"
#include "minicache/merge.hpp"
#include "minicache/quantizer.hpp"
#include "minicache/retention.hpp"
#include "minicache/tensor.hpp"

namespace minicache {

enum class MergeFn { Slerp, Mean, MaxNorm };

inline const char* to_string(MergeFn fn) {
    switch (fn) {
    case MergeFn::Slerp: return "slerp";
    case MergeFn::Mean: return "mean";
    case MergeFn::MaxNorm: return "maxnorm";
    }
    return "unknown";
}

struct EngineConfig {
    std::size_t num_layers = 0;
    std::size_t start_layer = 0;
    MergeParams merge;
    RetentionConfig retention;
    MergeFn merge_fn = MergeFn::Slerp;
    std::optional<QuantConfig> quant;

    static EngineConfig for_layers(std::size_t layers) {
        EngineConfig cfg;
        cfg.num_layers = layers;
        cfg.start_layer = layers / 2;
        return cfg;
    }

    // start_layer == num_layers is accepted and disables merging.
    void validate() const {
        if (num_layers == 0) throw Error(ErrorCode::InvalidConfig, "num_layers must be positive");
        if (start_layer > num_layers) throw Error(ErrorCode::InvalidConfig, "start_layer exceeds num_layers");
        merge.validate();
        retention.validate();
        if (quant) quant->validate();
    }

    /// True if layer l holds the merged record of the pair (l - 1, l).
    bool merges_at(std::size_t l) const noexcept {
        return l < num_layers && l >= start_layer && l % 2 == 1;
    }
};

/// Shared direction rows, stored dense or as RTN codes.
class DirectionStore {
public:
    DirectionStore() = default;
    DirectionStore(std::size_t hidden, std::optional<QuantConfig> quant) : m_dense(0, hidden) {
        if (quant) {
            m_quant.emplace();
            m_quant->cfg = *quant;
            m_quant->cols = hidden;
            m_quant->scales = Matrix(0, quant->groups(hidden));
        }
    }

    static DirectionStore from_codes(QuantizedMatrix q) {
        DirectionStore out;
        out.m_dense = Matrix(0, q.cols);
        out.m_quant = std::move(q);
        return out;
    }

    void append_row(std::span<const float> e) {
        if (m_quant) m_quant->append_row(e);
        else m_dense.append_row(e);
    }

    std::size_t rows() const noexcept { return m_quant ? m_quant->rows : m_dense.rows(); }
    bool quantized() const noexcept { return m_quant.has_value(); }
    const Matrix& dense() const noexcept { return m_dense; }
    const std::optional<QuantizedMatrix>& codes() const noexcept { return m_quant; }

    std::vector<float> row(std::size_t i) const {
        if (m_quant) return m_quant->dequantize_row(i);
        auto r = m_dense.row(i);
        return {r.begin(), r.end()};
    }

private:
    Matrix m_dense;
    std::optional<QuantizedMatrix> m_quant;
};

struct PendingToken {
    std::vector<float> key;
    std::vector<float> value;
};

/// Shared record of layers (l - 1, l). Retention indices are the union of the
/// key- and value-derived sets, so both retention sets carry the same indices.
struct MergedPairCache {
    std::size_t layer = 0;
    MergeFn merge_fn = MergeFn::Slerp;
    DirectionStore e_key;
    DirectionStore e_value;
    // Only populated for MergeFn::Slerp; the baselines restore their merged
    // vector verbatim.
    std::vector<float> mag_key_cur;
    std::vector<float> mag_key_prev;
    std::vector<float> mag_value_cur;
    std::vector<float> mag_value_prev;
    std::vector<float> omega_key;
    std::vector<float> omega_value;
    RetentionSet retained_key;
    RetentionSet retained_value;
    // Frozen at prefill; decode-time retention tests run against these.
    DistanceRange key_range;
    DistanceRange value_range;
    std::optional<PendingToken> pending;

    std::size_t tokens() const noexcept { return omega_key.size(); }
    std::size_t partner() const noexcept { return layer - 1; }
    bool stores_magnitudes() const noexcept { return merge_fn == MergeFn::Slerp; }
};

struct StandardSlot {
    TokenMatrix key;
    TokenMatrix value;
};

struct SharedRef {
    std::size_t partner = 0;
};

struct EmptySlot {};

using LayerSlot = std::variant<EmptySlot, StandardSlot, SharedRef, MergedPairCache>;

class LayeredKvCache {
public:
    LayeredKvCache(EngineConfig cfg, std::size_t hidden)
        : m_cfg(std::move(cfg)), m_hidden(hidden), m_slots(m_cfg.num_layers) {}

    const EngineConfig& config() const noexcept { return m_cfg; }
    std::size_t num_layers() const noexcept { return m_slots.size(); }
    std::size_t hidden() const noexcept { return m_hidden; }

    const LayerSlot& slot(std::size_t l) const { return m_slots.at(l); }
    LayerSlot& slot(std::size_t l) { return m_slots.at(l); }

    const MergedPairCache& merged_at(std::size_t l) const {
        if (auto* mp = std::get_if<MergedPairCache>(&m_slots.at(l))) return *mp;
        throw Error(ErrorCode::EmptySlot, "slot holds no merged record", l);
    }
    MergedPairCache& merged_at(std::size_t l) {
        return const_cast<MergedPairCache&>(std::as_const(*this).merged_at(l));
    }

    std::size_t merged_pair_count() const {
        std::size_t n = 0;
        for (const auto& s : m_slots) n += std::holds_alternative<MergedPairCache>(s) ? 1 : 0;
        return n;
    }

private:
    EngineConfig m_cfg;
    std::size_t m_hidden;
    std::vector<LayerSlot> m_slots;
};

namespace detail {

inline std::size_t cache_token_count(const LayeredKvCache& cache) {
    for (std::size_t l = 0; l < cache.num_layers(); ++l) {
        const LayerSlot& s = cache.slot(l);
        if (auto* st = std::get_if<StandardSlot>(&s)) return st->key.rows();
        if (auto* mp = std::get_if<MergedPairCache>(&s)) return mp->tokens();
    }
    return 0;
}

struct TokenMerge {
    std::vector<float> e;
    float mag_cur = 0.0f;
    float mag_prev = 0.0f;
    float omega = 0.0f;
    // Set when the pair cannot be merged and must be retained.
    bool degenerate = false;
};

inline std::vector<float> unit_or_axis(std::span<const float> x) {
    std::vector<float> out(x.size(), 0.0f);
    const double n = norm(x);
    if (n == 0.0) {
        if (!out.empty()) out[0] = 1.0f;
        return out;
    }
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>(x[i] / n);
    return out;
}

inline TokenMerge merge_token(MergeFn fn, std::span<const float> cur, std::span<const float> prev,
                              const MergeParams& params) {
    TokenMerge tm;
    const double n_cur = norm(cur);
    const double n_prev = norm(prev);
    tm.mag_cur = static_cast<float>(n_cur);
    tm.mag_prev = static_cast<float>(n_prev);
    const bool has_zero = n_cur == 0.0 || n_prev == 0.0;
    if (!has_zero) tm.omega = angle(cur, prev);

    switch (fn) {
    case MergeFn::Slerp:
        if (has_zero) {
            // A zero row restores exactly from its zero magnitude, so the
            // direction of the other row is lossless for both.
            tm.e = unit_or_axis(n_cur == 0.0 ? prev : cur);
            return tm;
        }
        try {
            PairMergeOutput o = slerp_merge(cur, prev, params);
            tm.e = std::move(o.e);
            tm.omega = o.omega;
        } catch (const Error& err) {
            if (err.code() != ErrorCode::DegenerateAntipodal) throw;
            tm.e = unit_or_axis(cur);
            tm.degenerate = true;
        }
        return tm;
    case MergeFn::Mean:
        tm.e = mean_merge(cur, prev);
        return tm;
    case MergeFn::MaxNorm:
        try {
            tm.e = max_norm_merge(cur, prev, params.eps_parallel);
        } catch (const Error& err) {
            if (err.code() != ErrorCode::DegenerateAntipodal) throw;
            tm.e = mean_merge(cur, prev);
            tm.degenerate = true;
        }
        return tm;
    }
    return tm;
}

enum class Side { Cur, Prev };

// Restores one layer of a merged pair, pending token excluded.
inline LayerKv restore_side(const MergedPairCache& mp, Side side, std::size_t hidden) {
    const std::size_t n = mp.tokens();
    LayerKv out{Matrix(n, hidden), Matrix(n, hidden)};
    const bool cur = side == Side::Cur;
    auto fill = [&](Matrix& dst, const DirectionStore& e, const std::vector<float>& mag_cur,
                    const std::vector<float>& mag_prev) {
        for (std::size_t i = 0; i < n; ++i) {
            const std::vector<float> row = e.row(i);
            auto target = dst.row(i);
            if (!mp.stores_magnitudes()) {
                std::copy(row.begin(), row.end(), target.begin());
                continue;
            }
            const double len = norm(row);
            const double scale = len == 0.0 ? 0.0 : (cur ? mag_cur[i] : mag_prev[i]) / len;
            for (std::size_t j = 0; j < hidden; ++j) target[j] = static_cast<float>(row[j] * scale);
        }
    };
    fill(out.key, mp.e_key, mp.mag_key_cur, mp.mag_key_prev);
    fill(out.value, mp.e_value, mp.mag_value_cur, mp.mag_value_prev);
    reinject_rows(out.key, mp.retained_key.indices, cur ? mp.retained_key.kept_cur : mp.retained_key.kept_prev);
    reinject_rows(out.value, mp.retained_value.indices,
                  cur ? mp.retained_value.kept_cur : mp.retained_value.kept_prev);
    return out;
}

inline void append_retained(RetentionSet& rs, std::size_t index, std::span<const float> cur,
                            std::span<const float> prev) {
    rs.indices.push_back(index);
    rs.kept_cur.append_row(cur);
    rs.kept_prev.append_row(prev);
}

// Appends one merged token pair to the record; used at decode time.
inline void append_merged_token(MergedPairCache& mp, const EngineConfig& cfg, std::span<const float> key_cur,
                                std::span<const float> key_prev, std::span<const float> value_cur,
                                std::span<const float> value_prev) {
    const TokenMerge k = merge_token(mp.merge_fn, key_cur, key_prev, cfg.merge);
    const TokenMerge v = merge_token(mp.merge_fn, value_cur, value_prev, cfg.merge);
    const std::size_t index = mp.tokens();
    mp.e_key.append_row(k.e);
    mp.e_value.append_row(v.e);
    if (mp.stores_magnitudes()) {
        mp.mag_key_cur.push_back(k.mag_cur);
        mp.mag_key_prev.push_back(k.mag_prev);
        mp.mag_value_cur.push_back(v.mag_cur);
        mp.mag_value_prev.push_back(v.mag_prev);
    }
    mp.omega_key.push_back(k.omega);
    mp.omega_value.push_back(v.omega);
    const auto dist = [](float omega) { return static_cast<float>(omega / std::numbers::pi); };
    const bool keep = k.degenerate || v.degenerate || is_retained(dist(k.omega), mp.key_range, cfg.retention) ||
                      is_retained(dist(v.omega), mp.value_range, cfg.retention);
    if (keep) {
        append_retained(mp.retained_key, index, key_cur, key_prev);
        append_retained(mp.retained_value, index, value_cur, value_prev);
    }
}

inline MergedPairCache build_merged_pair(const LayerKv& cur, const LayerKv& prev, std::size_t layer,
                                         const EngineConfig& cfg, std::size_t hidden) {
    MergedPairCache mp;
    mp.layer = layer;
    mp.merge_fn = cfg.merge_fn;
    mp.e_key = DirectionStore(hidden, cfg.quant);
    mp.e_value = DirectionStore(hidden, cfg.quant);
    const std::size_t n = cur.key.rows();
    std::vector<float> dist_key(n), dist_value(n);
    std::vector<std::size_t> degenerate;

    for (std::size_t i = 0; i < n; ++i) {
        const TokenMerge k = merge_token(cfg.merge_fn, cur.key.row(i), prev.key.row(i), cfg.merge);
        const TokenMerge v = merge_token(cfg.merge_fn, cur.value.row(i), prev.value.row(i), cfg.merge);
        mp.e_key.append_row(k.e);
        mp.e_value.append_row(v.e);
        if (mp.stores_magnitudes()) {
            mp.mag_key_cur.push_back(k.mag_cur);
            mp.mag_key_prev.push_back(k.mag_prev);
            mp.mag_value_cur.push_back(v.mag_cur);
            mp.mag_value_prev.push_back(v.mag_prev);
        }
        mp.omega_key.push_back(k.omega);
        mp.omega_value.push_back(v.omega);
        dist_key[i] = static_cast<float>(k.omega / std::numbers::pi);
        dist_value[i] = static_cast<float>(v.omega / std::numbers::pi);
        if (k.degenerate || v.degenerate) degenerate.push_back(i);
    }

    std::vector<std::size_t> indices;
    if (n > 0) {
        mp.key_range = distance_range(dist_key);
        mp.value_range = distance_range(dist_value);
        indices = union_indices(select_retention(dist_key, cfg.retention),
                                select_retention(dist_value, cfg.retention));
        indices = union_indices(indices, degenerate);
    }
    mp.retained_key = extract(cur.key, prev.key, indices);
    mp.retained_value = extract(cur.value, prev.value, indices);
    return mp;
}

inline std::vector<float> attend(std::span<const float> query, const Matrix& keys, const Matrix& values) {
    std::vector<float> ctx(values.cols(), 0.0f);
    const std::size_t n = keys.rows();
    if (n == 0) return ctx;
    std::vector<double> scores(n);
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        scores[i] = dot(query, keys.row(i));
        top = std::max(top, scores[i]);
    }
    double total = 0.0;
    for (double& s : scores) {
        s = std::exp(s - top);
        total += s;
    }
    std::vector<double> acc(values.cols(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double w = scores[i] / total;
        auto v = values.row(i);
        for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += w * v[j];
    }
    for (std::size_t j = 0; j < acc.size(); ++j) ctx[j] = static_cast<float>(acc[j]);
    return ctx;
}

} // namespace detail

/// Softmax attention of one query over a key/value cache, no scaling and no
/// positional terms.
inline std::vector<float> attend(std::span<const float> query, const Matrix& keys, const Matrix& values) {
    return detail::attend(query, keys, values);
}

inline LayeredKvCache prefill(const KvDump& dump, const EngineConfig& cfg) {
    cfg.validate();
    validate_dump(dump);
    if (dump.dims.batch != 1) {
        throw Error(ErrorCode::ShapeMismatch, "prefill takes one sequence; split batched dumps first");
    }
    if (dump.dims.layers != cfg.num_layers) {
        throw Error(ErrorCode::LayerCountMismatch, "dump has " + std::to_string(dump.dims.layers) +
                                                       " layers, engine expects " + std::to_string(cfg.num_layers));
    }
    const std::size_t h = dump.dims.hidden;
    LayeredKvCache cache(cfg, h);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        if (cfg.merges_at(l)) {
            cache.slot(l) = detail::build_merged_pair(dump.layers[l], dump.layers[l - 1], l, cfg, h);
            cache.slot(l - 1) = SharedRef{l};
        } else if (!(l + 1 < cfg.num_layers && cfg.merges_at(l + 1))) {
            cache.slot(l) = StandardSlot{dump.layers[l].key, dump.layers[l].value};
        }
    }
    return cache;
}

/// Approximate (merged) or exact (standard) states of layer l. A pending
/// decode token is included for the even layer of a pair between rounds.
inline LayerKv restore_layer(const LayeredKvCache& cache, std::size_t l) {
    const LayerSlot& s = cache.slot(l);
    if (auto* st = std::get_if<StandardSlot>(&s)) return {st->key, st->value};
    if (auto* ref = std::get_if<SharedRef>(&s)) {
        const MergedPairCache& mp = cache.merged_at(ref->partner);
        LayerKv out = detail::restore_side(mp, detail::Side::Prev, cache.hidden());
        if (mp.pending) {
            out.key.append_row(mp.pending->key);
            out.value.append_row(mp.pending->value);
        }
        return out;
    }
    if (auto* mp = std::get_if<MergedPairCache>(&s)) return detail::restore_side(*mp, detail::Side::Cur, cache.hidden());
    throw Error(ErrorCode::EmptySlot, "layer has no cache", l);
}

/// One decode step at layer l: append the new token, attend, and return the
/// attention context. Layers of a merged pair must be stepped even-then-odd.
inline std::vector<float> decode_step(LayeredKvCache& cache, std::size_t l, std::span<const float> new_key,
                                      std::span<const float> new_value, std::span<const float> query) {
    const std::size_t h = cache.hidden();
    if (new_key.size() != h || new_value.size() != h || query.size() != h) {
        throw Error(ErrorCode::ShapeMismatch, "decode vectors must have width " + std::to_string(h), l);
    }
    LayerSlot& s = cache.slot(l);

    if (auto* st = std::get_if<StandardSlot>(&s)) {
        st->key.append_row(new_key);
        st->value.append_row(new_value);
        return detail::attend(query, st->key, st->value);
    }
    if (auto* ref = std::get_if<SharedRef>(&s)) {
        MergedPairCache& mp = cache.merged_at(ref->partner);
        if (mp.pending) throw Error(ErrorCode::PendingConflict, "previous step of this pair never completed", l);
        LayerKv restored = detail::restore_side(mp, detail::Side::Prev, h);
        restored.key.append_row(new_key);
        restored.value.append_row(new_value);
        auto ctx = detail::attend(query, restored.key, restored.value);
        mp.pending = PendingToken{{new_key.begin(), new_key.end()}, {new_value.begin(), new_value.end()}};
        return ctx;
    }
    if (auto* mp = std::get_if<MergedPairCache>(&s)) {
        if (!mp->pending) throw Error(ErrorCode::MissingPending, "odd layer stepped before its partner", l);
        LayerKv restored = detail::restore_side(*mp, detail::Side::Cur, h);
        restored.key.append_row(new_key);
        restored.value.append_row(new_value);
        auto ctx = detail::attend(query, restored.key, restored.value);
        const PendingToken prev = std::move(*mp->pending);
        mp->pending.reset();
        detail::append_merged_token(*mp, cache.config(), new_key, prev.key, new_value, prev.value);
        return ctx;
    }
    throw Error(ErrorCode::EmptySlot, "layer has no cache", l);
}

/// Stored-state tally by category, in scalars. Quantized direction codes are
/// counted separately since they are not f32.
struct StorageBreakdown {
    std::size_t standard = 0;
    std::size_t directions = 0;
    std::size_t direction_codes = 0;
    std::size_t direction_scales = 0;
    std::size_t magnitudes = 0;
    std::size_t omegas = 0;
    std::size_t retained = 0;
    std::size_t pending = 0;
    // Retention indices, counted once per pair (not f32).
    std::size_t index_entries = 0;
    // Standard layers at or above the start layer that stayed unpaired.
    std::size_t unpaired_tail = 0;
    int code_bits = 0;

    std::size_t f32_total() const noexcept {
        return standard + directions + direction_scales + magnitudes + omegas + retained + pending;
    }
};

inline StorageBreakdown storage_breakdown(const LayeredKvCache& cache) {
    StorageBreakdown b;
    const auto& cfg = cache.config();
    for (std::size_t l = 0; l < cache.num_layers(); ++l) {
        const LayerSlot& s = cache.slot(l);
        if (auto* st = std::get_if<StandardSlot>(&s)) {
            const std::size_t n = st->key.size() + st->value.size();
            b.standard += n;
            if (l >= cfg.start_layer) b.unpaired_tail += n;
        } else if (auto* mp = std::get_if<MergedPairCache>(&s)) {
            for (const DirectionStore* e : {&mp->e_key, &mp->e_value}) {
                if (e->quantized()) {
                    b.direction_codes += e->codes()->codes.size();
                    b.direction_scales += e->codes()->scales.size();
                    b.code_bits = e->codes()->cfg.bits;
                } else {
                    b.directions += e->dense().size();
                }
            }
            b.magnitudes += mp->mag_key_cur.size() + mp->mag_key_prev.size() + mp->mag_value_cur.size() +
                            mp->mag_value_prev.size();
            b.omegas += mp->omega_key.size() + mp->omega_value.size();
            b.retained += mp->retained_key.kept_cur.size() + mp->retained_key.kept_prev.size() +
                          mp->retained_value.kept_cur.size() + mp->retained_value.kept_prev.size();
            b.index_entries += mp->retained_key.indices.size();
            if (mp->pending) b.pending += mp->pending->key.size() + mp->pending->value.size();
        }
    }
    return b;
}

/// Number of f32 scalars held by the cache, walking every container.
inline std::size_t stored_element_count(const LayeredKvCache& cache) {
    std::size_t total = 0;
    for (std::size_t l = 0; l < cache.num_layers(); ++l) {
        std::visit(
            [&](const auto& s) {
                using T = std::decay_t<decltype(s)>;
                if constexpr (std::is_same_v<T, StandardSlot>) {
                    total += s.key.size() + s.value.size();
                } else if constexpr (std::is_same_v<T, MergedPairCache>) {
                    for (const DirectionStore* e : {&s.e_key, &s.e_value}) {
                        total += e->quantized() ? e->codes()->scales.size() : e->dense().size();
                    }
                    for (const auto* v : {&s.mag_key_cur, &s.mag_key_prev, &s.mag_value_cur, &s.mag_value_prev,
                                          &s.omega_key, &s.omega_value}) {
                        total += v->size();
                    }
                    for (const RetentionSet* rs : {&s.retained_key, &s.retained_value}) {
                        total += rs->kept_cur.size() + rs->kept_prev.size();
                    }
                    if (s.pending) total += s.pending->key.size() + s.pending->value.size();
                }
            },
            cache.slot(l));
    }
    return total;
}

/// Frobenius norm of (restored - original) per layer, keys and values
/// together. The dump must be the single sequence the cache was built from.
inline std::vector<double> restoration_errors(const KvDump& dump, const LayeredKvCache& cache) {
    if (dump.layers.size() != cache.num_layers()) {
        throw Error(ErrorCode::LayerCountMismatch, "dump and cache layer counts differ");
    }
    std::vector<double> out;
    for (std::size_t l = 0; l < cache.num_layers(); ++l) {
        const LayerKv restored = restore_layer(cache, l);
        const double ek = frobenius_diff(restored.key, dump.layers[l].key);
        const double ev = frobenius_diff(restored.value, dump.layers[l].value);
        out.push_back(std::sqrt(ek * ek + ev * ev));
    }
    return out;
}

inline double total_restoration_error(const KvDump& dump, const LayeredKvCache& cache) {
    double acc = 0.0;
    for (double e : restoration_errors(dump, cache)) acc += e * e;
    return std::sqrt(acc);
}

} // namespace minicache

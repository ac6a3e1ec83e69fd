// Copyright (C) 2026 The MiniCache Engine Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Binary formats, all little-endian.
//
// KV dump ("KVD1"):
//   magic[4] version:u16 dtype:u8 (0 f32, 1 f16) batch:u32 layers:u32 tokens:u32 hidden:u32
//   then per layer 0..r-1: K [batch*tokens, hidden], V [batch*tokens, hidden], row-major.
//
// Compressed archive ("KVC1"):
//   magic[4] version:u16 batch:u32 layers:u32 tokens:u32 hidden:u32 start_layer:u32
//   merge_fn:u8 mode:u8 inclusive:u8 bits:u8 group_size:u32 t:f32 eps_parallel:f32 gamma:f32
//   then per sequence: every standard layer's K and V rows in layer order,
//   followed by one record per merged pair (see write_pair below).

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "minicache/cache_engine.hpp"
#include "minicache/error.hpp"
#include "minicache/tensor.hpp"

namespace minicache {

enum class DType : std::uint8_t { F32 = 0, F16 = 1 };

inline constexpr std::uint16_t kDumpVersion = 1;
inline constexpr std::uint16_t kArchiveVersion = 1;
inline constexpr std::size_t kDumpHeaderSize = 4 + 2 + 1 + 4 * 4;
inline constexpr std::size_t kArchiveHeaderSize = 4 + 2 + 5 * 4 + 4 + 4 + 3 * 4;

// IEEE binary16 <-> binary32, round-to-nearest-even on narrowing.
inline float half_to_float(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    const std::uint32_t exp = (h >> 10) & 0x1fu;
    const std::uint32_t mant = h & 0x3ffu;
    if (exp == 0) {
        const float mag = std::ldexp(static_cast<float>(mant), -24);
        return sign ? -mag : mag;
    }
    std::uint32_t bits;
    if (exp == 31) bits = sign | 0x7f800000u | (mant << 13);
    else bits = sign | ((exp - 15 + 127) << 23) | (mant << 13);
    return std::bit_cast<float>(bits);
}

inline std::uint16_t float_to_half(float f) {
    const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
    const auto sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
    const std::uint32_t abs = x & 0x7fffffffu;
    if (abs >= 0x7f800000u) return sign | (abs > 0x7f800000u ? 0x7e00u : 0x7c00u);
    if (abs >= 0x477ff000u) return sign | 0x7c00u;  // >= 65520 rounds to inf
    if (abs < 0x38800000u) {
        // subnormal half: units of 2^-24, nearbyint rounds half to even
        const float scaled = std::bit_cast<float>(abs) * 16777216.0f;
        return sign | static_cast<std::uint16_t>(std::nearbyint(scaled));
    }
    const std::uint32_t mant = abs & 0x7fffffu;
    const std::uint32_t exp = (abs >> 23) - 127 + 15;
    std::uint32_t h = (exp << 10) | (mant >> 13);
    const std::uint32_t rest = mant & 0x1fffu;
    if (rest > 0x1000u || (rest == 0x1000u && (h & 1u))) ++h;
    return sign | static_cast<std::uint16_t>(h);
}

namespace detail {

class ByteWriter {
public:
    std::vector<std::uint8_t> bytes;

    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        bytes.insert(bytes.end(), b, b + n);
    }
    void u8(std::uint8_t v) { bytes.push_back(v); }
    void u16(std::uint16_t v) {
        bytes.push_back(static_cast<std::uint8_t>(v));
        bytes.push_back(static_cast<std::uint8_t>(v >> 8));
    }
    void u32(std::uint32_t v) {
        for (int s = 0; s < 32; s += 8) bytes.push_back(static_cast<std::uint8_t>(v >> s));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void f32s(std::span<const float> v) {
        for (float x : v) f32(x);
    }
    void f16s(std::span<const float> v) {
        for (float x : v) u16(float_to_half(x));
    }
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> bytes) : m_bytes(bytes) {}

    std::size_t remaining() const noexcept { return m_bytes.size() - m_pos; }
    std::size_t position() const noexcept { return m_pos; }

    void need(std::size_t n, const char* what) const {
        if (remaining() < n) {
            throw Error(ErrorCode::TruncatedPayload, std::string(what) + ": expected " +
                                                         std::to_string(m_pos + n) + " bytes, file has " +
                                                         std::to_string(m_bytes.size()));
        }
    }
    std::uint8_t u8() {
        need(1, "u8");
        return m_bytes[m_pos++];
    }
    std::uint16_t u16() {
        need(2, "u16");
        const auto v = static_cast<std::uint16_t>(m_bytes[m_pos] | (m_bytes[m_pos + 1] << 8));
        m_pos += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4, "u32");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(m_bytes[m_pos + i]) << (8 * i);
        m_pos += 4;
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::span<const std::uint8_t> take(std::size_t n, const char* what) {
        need(n, what);
        auto out = m_bytes.subspan(m_pos, n);
        m_pos += n;
        return out;
    }

private:
    std::span<const std::uint8_t> m_bytes;
    std::size_t m_pos = 0;
};

inline void read_f32s(ByteReader& r, std::span<float> out) {
    for (float& x : out) x = r.f32();
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::IoError, "short write to " + path.string());
}

} // namespace detail

inline std::vector<std::uint8_t> encode_dump(const KvDump& d, DType dtype = DType::F32) {
    detail::ByteWriter w;
    w.raw("KVD1", 4);
    w.u16(kDumpVersion);
    w.u8(static_cast<std::uint8_t>(dtype));
    w.u32(d.dims.batch);
    w.u32(d.dims.layers);
    w.u32(d.dims.tokens);
    w.u32(d.dims.hidden);
    for (const auto& layer : d.layers) {
        for (const Matrix* m : {&layer.key, &layer.value}) {
            if (dtype == DType::F32) w.f32s(m->data());
            else w.f16s(m->data());
        }
    }
    return std::move(w.bytes);
}

inline KvDump decode_dump(std::span<const std::uint8_t> bytes) {
    detail::ByteReader r(bytes);
    const auto magic = r.take(4, "magic");
    if (std::memcmp(magic.data(), "KVD1", 4) != 0) {
        throw Error(ErrorCode::BadMagic, "expected KVD1, got '" + std::string(magic.begin(), magic.end()) + "'");
    }
    const std::uint16_t version = r.u16();
    if (version != kDumpVersion) throw Error(ErrorCode::UnsupportedVersion, "dump version " + std::to_string(version));
    const std::uint8_t dtype = r.u8();
    if (dtype > 1) throw Error(ErrorCode::UnsupportedVersion, "unknown dtype code " + std::to_string(dtype));
    KvDump d;
    d.dims.batch = r.u32();
    d.dims.layers = r.u32();
    d.dims.tokens = r.u32();
    d.dims.hidden = r.u32();

    const std::size_t elem = dtype == 0 ? 4 : 2;
    const std::size_t rows = static_cast<std::size_t>(d.dims.batch) * d.dims.tokens;
    const std::size_t per_matrix = rows * d.dims.hidden;
    const std::size_t expected = 2 * static_cast<std::size_t>(d.dims.layers) * per_matrix * elem;
    if (r.remaining() != expected) {
        const ErrorCode code = r.remaining() < expected ? ErrorCode::TruncatedPayload : ErrorCode::ShapeMismatch;
        throw Error(code, "payload expected " + std::to_string(expected) + " bytes, actual " +
                              std::to_string(r.remaining()));
    }
    for (std::uint32_t l = 0; l < d.dims.layers; ++l) {
        LayerKv layer{Matrix(rows, d.dims.hidden), Matrix(rows, d.dims.hidden)};
        for (Matrix* m : {&layer.key, &layer.value}) {
            if (elem == 4) {
                detail::read_f32s(r, m->data());
            } else {
                for (float& x : m->data()) x = half_to_float(r.u16());
            }
        }
        d.layers.push_back(std::move(layer));
    }
    return d;
}

inline void write_dump(const KvDump& d, const std::filesystem::path& path, DType dtype = DType::F32) {
    detail::write_file(path, encode_dump(d, dtype));
}

inline KvDump read_dump(const std::filesystem::path& path) { return decode_dump(detail::read_file(path)); }

namespace detail {

inline void write_directions(ByteWriter& w, const DirectionStore& e) {
    if (!e.quantized()) {
        w.f32s(e.dense().data());
        return;
    }
    const QuantizedMatrix& q = *e.codes();
    if (q.cfg.bits == 8) {
        for (std::int8_t c : q.codes) w.u8(static_cast<std::uint8_t>(c));
    } else {
        // two 4-bit codes per byte, low nibble first
        for (std::size_t i = 0; i < q.codes.size(); i += 2) {
            const auto lo = static_cast<std::uint8_t>(q.codes[i] & 0x0f);
            const auto hi = static_cast<std::uint8_t>(i + 1 < q.codes.size() ? (q.codes[i + 1] & 0x0f) : 0);
            w.u8(static_cast<std::uint8_t>(lo | (hi << 4)));
        }
    }
    w.f32s(q.scales.data());
}

inline DirectionStore read_directions(ByteReader& r, std::size_t n, std::size_t h,
                                      const std::optional<QuantConfig>& quant) {
    DirectionStore store(h, quant);
    if (!quant) {
        std::vector<float> row(h);
        for (std::size_t i = 0; i < n; ++i) {
            read_f32s(r, row);
            store.append_row(row);
        }
        return store;
    }
    QuantizedMatrix q;
    q.cfg = *quant;
    q.rows = n;
    q.cols = h;
    q.codes.resize(n * h);
    auto sign_extend4 = [](std::uint8_t v) { return static_cast<std::int8_t>((v & 0x08) ? (v | 0xf0) : v); };
    if (quant->bits == 8) {
        for (auto& c : q.codes) c = static_cast<std::int8_t>(r.u8());
    } else {
        for (std::size_t i = 0; i < q.codes.size(); i += 2) {
            const std::uint8_t b = r.u8();
            q.codes[i] = sign_extend4(b & 0x0f);
            if (i + 1 < q.codes.size()) q.codes[i + 1] = sign_extend4(b >> 4);
        }
    }
    q.scales = Matrix(n, quant->groups(h));
    read_f32s(r, q.scales.data());
    return DirectionStore::from_codes(std::move(q));
}

// Pair record: n_retained:u32, key range (min,max), value range (min,max),
// directions K then V, magnitudes (slerp only: K cur, K prev, V cur, V prev),
// omegas K then V, indices u32[n_retained], kept rows K cur, K prev, V cur, V prev.
inline void write_pair(ByteWriter& w, const MergedPairCache& mp) {
    w.u32(static_cast<std::uint32_t>(mp.retained_key.size()));
    w.f32(mp.key_range.min);
    w.f32(mp.key_range.max);
    w.f32(mp.value_range.min);
    w.f32(mp.value_range.max);
    write_directions(w, mp.e_key);
    write_directions(w, mp.e_value);
    if (mp.stores_magnitudes()) {
        w.f32s(mp.mag_key_cur);
        w.f32s(mp.mag_key_prev);
        w.f32s(mp.mag_value_cur);
        w.f32s(mp.mag_value_prev);
    }
    w.f32s(mp.omega_key);
    w.f32s(mp.omega_value);
    for (std::size_t i : mp.retained_key.indices) w.u32(static_cast<std::uint32_t>(i));
    w.f32s(mp.retained_key.kept_cur.data());
    w.f32s(mp.retained_key.kept_prev.data());
    w.f32s(mp.retained_value.kept_cur.data());
    w.f32s(mp.retained_value.kept_prev.data());
}

inline MergedPairCache read_pair(ByteReader& r, std::size_t layer, std::size_t n, std::size_t h,
                                 const EngineConfig& cfg) {
    MergedPairCache mp;
    mp.layer = layer;
    mp.merge_fn = cfg.merge_fn;
    const std::uint32_t kept = r.u32();
    if (kept > n) throw Error(ErrorCode::IndexOutOfRange, "more retained rows than tokens", layer);
    mp.key_range = {r.f32(), r.f32()};
    mp.value_range = {r.f32(), r.f32()};
    mp.e_key = read_directions(r, n, h, cfg.quant);
    mp.e_value = read_directions(r, n, h, cfg.quant);
    auto vec = [&](std::vector<float>& v) {
        v.resize(n);
        read_f32s(r, v);
    };
    if (mp.stores_magnitudes()) {
        vec(mp.mag_key_cur);
        vec(mp.mag_key_prev);
        vec(mp.mag_value_cur);
        vec(mp.mag_value_prev);
    }
    vec(mp.omega_key);
    vec(mp.omega_value);
    std::vector<std::size_t> indices(kept);
    for (auto& i : indices) {
        i = r.u32();
        if (i >= n) throw Error(ErrorCode::IndexOutOfRange, "retention index past token count", layer);
    }
    for (RetentionSet* rs : {&mp.retained_key, &mp.retained_value}) rs->indices = indices;
    for (Matrix* m : {&mp.retained_key.kept_cur, &mp.retained_key.kept_prev, &mp.retained_value.kept_cur,
                      &mp.retained_value.kept_prev}) {
        *m = Matrix(kept, h);
        read_f32s(r, m->data());
    }
    return mp;
}

} // namespace detail

/// Serializes finished prefill caches (one per sequence, same config and
/// token count). Pending decode tokens are not part of the format.
inline std::vector<std::uint8_t> encode_archive(std::span<const LayeredKvCache> caches) {
    if (caches.empty()) throw Error(ErrorCode::EmptyInput, "no caches to archive");
    const LayeredKvCache& first = caches.front();
    const EngineConfig& cfg = first.config();
    detail::ByteWriter w;
    w.raw("KVC1", 4);
    w.u16(kArchiveVersion);
    w.u32(static_cast<std::uint32_t>(caches.size()));
    w.u32(static_cast<std::uint32_t>(cfg.num_layers));
    w.u32(static_cast<std::uint32_t>(detail::cache_token_count(first)));
    w.u32(static_cast<std::uint32_t>(first.hidden()));
    w.u32(static_cast<std::uint32_t>(cfg.start_layer));
    w.u8(static_cast<std::uint8_t>(cfg.merge_fn));
    w.u8(static_cast<std::uint8_t>(cfg.retention.mode));
    w.u8(cfg.retention.inclusive_at_gamma_one ? 1 : 0);
    w.u8(static_cast<std::uint8_t>(cfg.quant ? cfg.quant->bits : 0));
    w.u32(static_cast<std::uint32_t>(cfg.quant ? cfg.quant->group_size : 0));
    w.f32(cfg.merge.t);
    w.f32(cfg.merge.eps_parallel);
    w.f32(cfg.retention.gamma);

    for (const LayeredKvCache& cache : caches) {
        for (std::size_t l = 0; l < cache.num_layers(); ++l) {
            if (auto* st = std::get_if<StandardSlot>(&cache.slot(l))) {
                w.f32s(st->key.data());
                w.f32s(st->value.data());
            }
        }
        for (std::size_t l = 0; l < cache.num_layers(); ++l) {
            if (auto* mp = std::get_if<MergedPairCache>(&cache.slot(l))) {
                if (mp->pending) throw Error(ErrorCode::PendingConflict, "cannot archive a mid-step cache", l);
                detail::write_pair(w, *mp);
            }
        }
    }
    return std::move(w.bytes);
}

inline std::vector<LayeredKvCache> decode_archive(std::span<const std::uint8_t> bytes) {
    detail::ByteReader r(bytes);
    const auto magic = r.take(4, "magic");
    if (std::memcmp(magic.data(), "KVC1", 4) != 0) throw Error(ErrorCode::BadMagic, "expected KVC1");
    const std::uint16_t version = r.u16();
    if (version != kArchiveVersion) {
        throw Error(ErrorCode::UnsupportedVersion, "archive version " + std::to_string(version));
    }
    const std::uint32_t batch = r.u32();
    EngineConfig cfg;
    cfg.num_layers = r.u32();
    const std::size_t n = r.u32();
    const std::size_t h = r.u32();
    cfg.start_layer = r.u32();
    const std::uint8_t merge_fn = r.u8();
    const std::uint8_t mode = r.u8();
    if (merge_fn > 2 || mode > 1) throw Error(ErrorCode::UnsupportedVersion, "unknown merge function or mode");
    cfg.merge_fn = static_cast<MergeFn>(merge_fn);
    cfg.retention.mode = static_cast<RetentionMode>(mode);
    cfg.retention.inclusive_at_gamma_one = r.u8() != 0;
    const std::uint8_t bits = r.u8();
    const std::uint32_t group = r.u32();
    if (bits != 0) cfg.quant = QuantConfig{bits, group};
    cfg.merge.t = r.f32();
    cfg.merge.eps_parallel = r.f32();
    cfg.retention.gamma = r.f32();
    cfg.validate();

    std::vector<LayeredKvCache> out;
    for (std::uint32_t b = 0; b < batch; ++b) {
        LayeredKvCache cache(cfg, h);
        for (std::size_t l = 0; l < cfg.num_layers; ++l) {
            if (cfg.merges_at(l)) {
                cache.slot(l - 1) = SharedRef{l};
            } else if (!(l + 1 < cfg.num_layers && cfg.merges_at(l + 1))) {
                StandardSlot st{Matrix(n, h), Matrix(n, h)};
                detail::read_f32s(r, st.key.data());
                detail::read_f32s(r, st.value.data());
                cache.slot(l) = std::move(st);
            }
        }
        for (std::size_t l = 0; l < cfg.num_layers; ++l) {
            if (cfg.merges_at(l)) cache.slot(l) = detail::read_pair(r, l, n, h, cfg);
        }
        out.push_back(std::move(cache));
    }
    if (r.remaining() != 0) {
        throw Error(ErrorCode::ShapeMismatch, std::to_string(r.remaining()) + " trailing bytes after archive");
    }
    return out;
}

} // namespace minicache

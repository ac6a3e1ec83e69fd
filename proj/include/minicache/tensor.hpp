// Copyright (C) 2026 The MiniCache Engine Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "minicache/error.hpp"

namespace minicache {

enum class Role { Key, Value };

inline const char* to_string(Role role) { return role == Role::Key ? "key" : "value"; }

/// Dense row-major f32 matrix. Row i is the state vector of token i.
class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f)
        : m_rows(rows), m_cols(cols), m_data(rows * cols, fill) {}

    Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
        : m_rows(rows), m_cols(cols), m_data(std::move(data)) {
        if (m_data.size() != rows * cols) {
            throw Error(ErrorCode::ShapeMismatch,
                        "matrix data size " + std::to_string(m_data.size()) +
                            " does not match " + std::to_string(rows) + "x" + std::to_string(cols));
        }
    }

    std::size_t rows() const noexcept { return m_rows; }
    std::size_t cols() const noexcept { return m_cols; }
    std::size_t size() const noexcept { return m_data.size(); }
    bool empty() const noexcept { return m_data.empty(); }

    std::span<float> row(std::size_t i) { return {m_data.data() + i * m_cols, m_cols}; }
    std::span<const float> row(std::size_t i) const { return {m_data.data() + i * m_cols, m_cols}; }

    float& operator()(std::size_t i, std::size_t j) { return m_data[i * m_cols + j]; }
    float operator()(std::size_t i, std::size_t j) const { return m_data[i * m_cols + j]; }

    std::span<float> data() noexcept { return m_data; }
    std::span<const float> data() const noexcept { return m_data; }

    void append_row(std::span<const float> values) {
        if (m_rows == 0 && m_cols == 0) m_cols = values.size();
        if (values.size() != m_cols) {
            throw Error(ErrorCode::ShapeMismatch,
                        "appended row has width " + std::to_string(values.size()) +
                            ", expected " + std::to_string(m_cols));
        }
        m_data.insert(m_data.end(), values.begin(), values.end());
        ++m_rows;
    }

    // Rows [first, first + count) as a new matrix.
    Matrix slice_rows(std::size_t first, std::size_t count) const {
        Matrix out(count, m_cols);
        std::copy(m_data.begin() + static_cast<std::ptrdiff_t>(first * m_cols),
                  m_data.begin() + static_cast<std::ptrdiff_t>((first + count) * m_cols),
                  out.m_data.begin());
        return out;
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t m_rows = 0;
    std::size_t m_cols = 0;
    std::vector<float> m_data;
};

/// [n_tok, h] key or value states of one layer. Multi-head layouts are
/// flattened to h = heads * head_dim before they get here.
using TokenMatrix = Matrix;

struct Dims {
    std::uint32_t batch = 1;
    std::uint32_t layers = 0;
    std::uint32_t tokens = 0;
    std::uint32_t hidden = 0;

    friend bool operator==(const Dims&, const Dims&) = default;
};

struct LayerKv {
    TokenMatrix key;
    TokenMatrix value;

    friend bool operator==(const LayerKv&, const LayerKv&) = default;
};

/// Per-layer key/value states of a batch of sequences. Each matrix holds
/// batch * tokens rows, sequence-major.
struct KvDump {
    Dims dims;
    std::vector<LayerKv> layers;

    friend bool operator==(const KvDump&, const KvDump&) = default;
};

inline double dot(std::span<const float> a, std::span<const float> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
    return acc;
}

inline double norm(std::span<const float> v) { return std::sqrt(dot(v, v)); }

inline std::vector<float> row_norm(const TokenMatrix& m) {
    std::vector<float> out(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) out[i] = static_cast<float>(norm(m.row(i)));
    return out;
}

inline double frobenius_diff(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw Error(ErrorCode::ShapeMismatch, "frobenius_diff on differently shaped matrices");
    }
    double acc = 0.0;
    auto da = a.data();
    auto db = b.data();
    for (std::size_t i = 0; i < da.size(); ++i) {
        const double d = static_cast<double>(da[i]) - db[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

inline void validate_dump(const KvDump& d) {
    const Dims& dims = d.dims;
    if (dims.batch == 0 || dims.layers == 0 || dims.hidden == 0) {
        throw Error(ErrorCode::ShapeMismatch, "batch, layers and hidden must be positive");
    }
    if (d.layers.size() != dims.layers) {
        throw Error(ErrorCode::LayerCountMismatch,
                    "dims declare " + std::to_string(dims.layers) + " layers, dump holds " +
                        std::to_string(d.layers.size()));
    }
    const std::size_t rows = static_cast<std::size_t>(dims.batch) * dims.tokens;
    for (std::size_t l = 0; l < d.layers.size(); ++l) {
        for (const TokenMatrix* m : {&d.layers[l].key, &d.layers[l].value}) {
            if (m->rows() != rows || (rows != 0 && m->cols() != dims.hidden)) {
                throw Error(ErrorCode::ShapeMismatch,
                            "expected " + std::to_string(rows) + "x" + std::to_string(dims.hidden) +
                                ", got " + std::to_string(m->rows()) + "x" + std::to_string(m->cols()),
                            l);
            }
            for (std::size_t i = 0; i < m->rows(); ++i) {
                for (float x : m->row(i)) {
                    if (!std::isfinite(x)) throw Error(ErrorCode::NonFiniteValue, "", l, i);
                }
            }
        }
    }
}

/// Splits a batched dump into one single-sequence dump per batch entry.
inline std::vector<KvDump> split_batch(const KvDump& d) {
    std::vector<KvDump> out;
    const std::size_t n = d.dims.tokens;
    for (std::size_t b = 0; b < d.dims.batch; ++b) {
        KvDump seq;
        seq.dims = d.dims;
        seq.dims.batch = 1;
        for (const auto& layer : d.layers) {
            seq.layers.push_back({layer.key.slice_rows(b * n, n), layer.value.slice_rows(b * n, n)});
        }
        out.push_back(std::move(seq));
    }
    return out;
}

} // namespace minicache

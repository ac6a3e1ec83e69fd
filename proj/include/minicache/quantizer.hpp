// Copyright (C) 2026 The MiniCache Engine Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Symmetric round-to-nearest quantization with one scale per group of
// `group_size` consecutive hidden channels in each row.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "minicache/error.hpp"
#include "minicache/tensor.hpp"

namespace minicache {

struct QuantConfig {
    int bits = 4;
    std::size_t group_size = 32;

    void validate() const {
        if (bits != 4 && bits != 8) throw Error(ErrorCode::InvalidConfig, "bits must be 4 or 8");
        if (group_size == 0) throw Error(ErrorCode::InvalidConfig, "group_size must be positive");
    }

    int qmax() const noexcept { return (1 << (bits - 1)) - 1; }
    int qmin() const noexcept { return -(1 << (bits - 1)); }
    std::size_t groups(std::size_t cols) const noexcept { return (cols + group_size - 1) / group_size; }
};

struct QuantizedMatrix {
    QuantConfig cfg;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::int8_t> codes;  // [rows, cols]
    Matrix scales;                   // [rows, ceil(cols / group_size)]

    std::span<const std::int8_t> row_codes(std::size_t i) const { return {codes.data() + i * cols, cols}; }

    void append_row(std::span<const float> values) {
        if (rows == 0 && cols == 0) {
            cols = values.size();
            scales = Matrix(0, cfg.groups(cols));
        }
        if (values.size() != cols) throw Error(ErrorCode::ShapeMismatch, "quantized row width mismatch");
        const std::size_t n_groups = cfg.groups(cols);
        std::vector<float> row_scales(n_groups);
        const double qmax = cfg.qmax();
        for (std::size_t g = 0; g < n_groups; ++g) {
            const std::size_t lo = g * cfg.group_size;
            const std::size_t hi = std::min(cols, lo + cfg.group_size);
            double amax = 0.0;
            for (std::size_t j = lo; j < hi; ++j) amax = std::max(amax, std::abs(static_cast<double>(values[j])));
            const float scale = amax == 0.0 ? 1.0f : static_cast<float>(amax / qmax);
            row_scales[g] = scale;
            for (std::size_t j = lo; j < hi; ++j) {
                const double q = amax == 0.0 ? 0.0 : std::nearbyint(values[j] / static_cast<double>(scale));
                codes.push_back(static_cast<std::int8_t>(std::clamp(q, double(cfg.qmin()), qmax)));
            }
        }
        scales.append_row(row_scales);
        ++rows;
    }

    std::vector<float> dequantize_row(std::size_t i) const {
        std::vector<float> out(cols);
        auto c = row_codes(i);
        for (std::size_t j = 0; j < cols; ++j) out[j] = static_cast<float>(c[j]) * scales(i, j / cfg.group_size);
        return out;
    }
};

inline QuantizedMatrix quantize(const Matrix& m, const QuantConfig& cfg) {
    cfg.validate();
    QuantizedMatrix q;
    q.cfg = cfg;
    q.cols = m.cols();
    q.scales = Matrix(0, cfg.groups(m.cols()));
    q.codes.reserve(m.size());
    for (std::size_t i = 0; i < m.rows(); ++i) q.append_row(m.row(i));
    return q;
}

inline Matrix dequantize(const QuantizedMatrix& q) {
    Matrix out(0, q.cols);
    for (std::size_t i = 0; i < q.rows; ++i) out.append_row(q.dequantize_row(i));
    return out;
}

} // namespace minicache

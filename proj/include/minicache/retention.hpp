// Copyright (C) 2026 The MiniCache Engine Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <iterator>
#include <span>
#include <utility>
#include <vector>

#include "minicache/error.hpp"
#include "minicache/tensor.hpp"

namespace minicache {

enum class RetentionMode {
    // Keep i where d_i < d_min + (d_max - d_min) * gamma, as printed.
    PaperFormula,
    // Keep i where d_i > d_max - (d_max - d_min) * gamma, i.e. the least
    // similar pairs.
    DistantFirst,
};

struct RetentionConfig {
    float gamma = 0.05f;
    RetentionMode mode = RetentionMode::PaperFormula;
    // At gamma == 1 switch the strict comparison to an inclusive one so that
    // every token is kept.
    bool inclusive_at_gamma_one = true;

    void validate() const {
        if (!(gamma >= 0.0f && gamma <= 1.0f)) throw Error(ErrorCode::InvalidConfig, "gamma must lie in [0, 1]");
    }
};

struct DistanceRange {
    float min = 0.0f;
    float max = 0.0f;
};

/// Rows kept verbatim for the token indices that are not merged.
struct RetentionSet {
    std::vector<std::size_t> indices;
    Matrix kept_cur;
    Matrix kept_prev;

    std::size_t size() const noexcept { return indices.size(); }
};

inline DistanceRange distance_range(std::span<const float> distances) {
    if (distances.empty()) throw Error(ErrorCode::EmptyInput, "no distances to select from");
    auto [lo, hi] = std::minmax_element(distances.begin(), distances.end());
    return {*lo, *hi};
}

/// Single-token retention predicate against a fixed distance range. Used at
/// prefill with the range of the whole prompt and at decode with the range
/// frozen at prefill.
inline bool is_retained(float d, DistanceRange range, const RetentionConfig& cfg) {
    const bool inclusive = cfg.inclusive_at_gamma_one && cfg.gamma == 1.0f;
    if (inclusive) return true;
    if (cfg.gamma == 0.0f) return false;
    const double lo = range.min;
    const double hi = range.max;
    const double span = (hi - lo) * static_cast<double>(cfg.gamma);
    if (cfg.mode == RetentionMode::PaperFormula) return static_cast<double>(d) < lo + span;
    return static_cast<double>(d) > hi - span;
}

inline std::vector<std::size_t> select_retention(std::span<const float> distances, const RetentionConfig& cfg) {
    const DistanceRange range = distance_range(distances);
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < distances.size(); ++i) {
        if (is_retained(distances[i], range, cfg)) out.push_back(i);
    }
    return out;
}

/// Sorted union of two sorted index lists.
inline std::vector<std::size_t> union_indices(std::span<const std::size_t> a, std::span<const std::size_t> b) {
    std::vector<std::size_t> out;
    std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
    return out;
}

inline RetentionSet extract(const TokenMatrix& pair_cur, const TokenMatrix& pair_prev,
                            std::span<const std::size_t> indices) {
    if (pair_cur.rows() != pair_prev.rows() || pair_cur.cols() != pair_prev.cols()) {
        throw Error(ErrorCode::ShapeMismatch, "retention source matrices differ in shape");
    }
    RetentionSet rs;
    rs.indices.assign(indices.begin(), indices.end());
    rs.kept_cur = Matrix(0, pair_cur.cols());
    rs.kept_prev = Matrix(0, pair_cur.cols());
    for (std::size_t k = 0; k < indices.size(); ++k) {
        const std::size_t i = indices[k];
        if (i >= pair_cur.rows()) {
            throw Error(ErrorCode::IndexOutOfRange,
                        "retention index " + std::to_string(i) + " >= " + std::to_string(pair_cur.rows()));
        }
        if (k > 0 && i <= indices[k - 1]) {
            throw Error(ErrorCode::IndexOutOfRange, "retention indices must be strictly increasing");
        }
        rs.kept_cur.append_row(pair_cur.row(i));
        rs.kept_prev.append_row(pair_prev.row(i));
    }
    return rs;
}

// Overwrites the retained rows of one restored matrix in place.
inline void reinject_rows(TokenMatrix& restored, std::span<const std::size_t> indices, const Matrix& kept) {
    if (kept.rows() != indices.size() || (kept.rows() != 0 && kept.cols() != restored.cols())) {
        throw Error(ErrorCode::ShapeMismatch, "retained rows do not match the restored matrix");
    }
    for (std::size_t k = 0; k < indices.size(); ++k) {
        const std::size_t i = indices[k];
        if (i >= restored.rows()) {
            throw Error(ErrorCode::IndexOutOfRange,
                        "retention index " + std::to_string(i) + " >= " + std::to_string(restored.rows()));
        }
        std::copy(kept.row(k).begin(), kept.row(k).end(), restored.row(i).begin());
    }
}

inline std::pair<TokenMatrix, TokenMatrix> reinject(TokenMatrix restored_cur, TokenMatrix restored_prev,
                                                    const RetentionSet& rs) {
    if (restored_cur.rows() != restored_prev.rows() || restored_cur.cols() != restored_prev.cols()) {
        throw Error(ErrorCode::ShapeMismatch, "restored matrices differ in shape");
    }
    reinject_rows(restored_cur, rs.indices, rs.kept_cur);
    reinject_rows(restored_prev, rs.indices, rs.kept_prev);
    return {std::move(restored_cur), std::move(restored_prev)};
}

} // namespace minicache

// Copyright (C) 2026 The MiniCache Engine Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Pairwise merge and restore kernels for one token's state at two adjacent
// layers. "cur" is layer l, "prev" is layer l-1. Arithmetic is carried out in
// double and stored as f32.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include "minicache/error.hpp"
#include "minicache/tensor.hpp"

namespace minicache {

struct MergeParams {
    float t = 0.6f;
    // Threshold on sin(omega) below which SLERP falls back to normalized lerp.
    float eps_parallel = 1e-6f;

    void validate() const {
        if (!(t >= 0.0f && t <= 1.0f)) throw Error(ErrorCode::InvalidConfig, "t must lie in [0, 1]");
        if (!(eps_parallel > 0.0f)) throw Error(ErrorCode::InvalidConfig, "eps_parallel must be positive");
    }
};

/// Shared direction plus the per-layer magnitudes and angle of one token pair.
struct PairMergeOutput {
    std::vector<float> e;
    float mag_prev = 0.0f;
    float mag_cur = 0.0f;
    float omega = 0.0f;
};

namespace detail {

inline void check_same_width(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) {
        throw Error(ErrorCode::ShapeMismatch,
                    "vector widths differ: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    }
}

inline double clamped_cosine(double dot_ab, double norm_a, double norm_b) {
    return std::clamp(dot_ab / (norm_a * norm_b), -1.0, 1.0);
}

} // namespace detail

inline float angle(std::span<const float> x_cur, std::span<const float> x_prev) {
    detail::check_same_width(x_cur, x_prev);
    const double n_cur = norm(x_cur);
    const double n_prev = norm(x_prev);
    if (n_cur == 0.0 || n_prev == 0.0) throw Error(ErrorCode::ZeroVector, "angle of a zero vector");
    return static_cast<float>(std::acos(detail::clamped_cosine(dot(x_cur, x_prev), n_cur, n_prev)));
}

inline float angular_distance(std::span<const float> x_cur, std::span<const float> x_prev) {
    return static_cast<float>(static_cast<double>(angle(x_cur, x_prev)) / std::numbers::pi);
}

/// Spherical interpolation of the two unit directions:
///   e = sin((1-t)W)/sin W * x_prev/|x_prev| + sin(tW)/sin W * x_cur/|x_cur|
/// t = 0 recovers the previous layer's direction, t = 1 the current one.
/// Near-parallel pairs (sin W < eps) use normalized linear interpolation;
/// near-antipodal pairs are rejected and must be retained by the caller.
inline PairMergeOutput slerp_merge(std::span<const float> x_cur, std::span<const float> x_prev,
                                   const MergeParams& p) {
    detail::check_same_width(x_cur, x_prev);
    const double n_cur = norm(x_cur);
    const double n_prev = norm(x_prev);
    if (n_cur == 0.0 || n_prev == 0.0) throw Error(ErrorCode::ZeroVector, "slerp of a zero vector");

    const double omega = std::acos(detail::clamped_cosine(dot(x_cur, x_prev), n_cur, n_prev));
    const double eps = p.eps_parallel;
    if (omega > std::numbers::pi - eps) {
        throw Error(ErrorCode::DegenerateAntipodal, "token pair is antipodal, omega=" + std::to_string(omega));
    }

    const double t = p.t;
    const double sin_omega = std::sin(omega);
    const std::size_t h = x_cur.size();
    PairMergeOutput out;
    out.e.resize(h);
    out.mag_cur = static_cast<float>(n_cur);
    out.mag_prev = static_cast<float>(n_prev);
    out.omega = static_cast<float>(omega);

    if (sin_omega < eps) {
        std::vector<double> lerp(h);
        double acc = 0.0;
        for (std::size_t i = 0; i < h; ++i) {
            lerp[i] = (1.0 - t) * (x_prev[i] / n_prev) + t * (x_cur[i] / n_cur);
            acc += lerp[i] * lerp[i];
        }
        const double len = std::sqrt(acc);
        for (std::size_t i = 0; i < h; ++i) out.e[i] = static_cast<float>(lerp[i] / len);
        return out;
    }

    const double w_prev = std::sin((1.0 - t) * omega) / sin_omega / n_prev;
    const double w_cur = std::sin(t * omega) / sin_omega / n_cur;
    for (std::size_t i = 0; i < h; ++i) {
        out.e[i] = static_cast<float>(w_prev * x_prev[i] + w_cur * x_cur[i]);
    }
    return out;
}

/// Rescales the shared direction to each layer's stored norm. Divides by |e|
/// so the result does not depend on e being exactly unit length.
inline std::pair<std::vector<float>, std::vector<float>> restore_pair(const PairMergeOutput& o) {
    const double len = norm(o.e);
    std::vector<float> cur(o.e.size());
    std::vector<float> prev(o.e.size());
    if (len == 0.0) return {cur, prev};
    const double s_cur = o.mag_cur / len;
    const double s_prev = o.mag_prev / len;
    for (std::size_t i = 0; i < o.e.size(); ++i) {
        cur[i] = static_cast<float>(o.e[i] * s_cur);
        prev[i] = static_cast<float>(o.e[i] * s_prev);
    }
    return {std::move(cur), std::move(prev)};
}

// Averaging baseline: the merged vector stands in for both layers as-is.
inline std::vector<float> mean_merge(std::span<const float> x_cur, std::span<const float> x_prev) {
    detail::check_same_width(x_cur, x_prev);
    std::vector<float> out(x_cur.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = static_cast<float>((static_cast<double>(x_cur[i]) + x_prev[i]) * 0.5);
    }
    return out;
}

/// Direction of the mean, scaled to the larger of the two input norms.
inline std::vector<float> max_norm_merge(std::span<const float> x_cur, std::span<const float> x_prev,
                                         float eps_parallel = MergeParams{}.eps_parallel) {
    detail::check_same_width(x_cur, x_prev);
    const std::size_t h = x_cur.size();
    std::vector<double> mean(h);
    double acc = 0.0;
    for (std::size_t i = 0; i < h; ++i) {
        mean[i] = (static_cast<double>(x_cur[i]) + x_prev[i]) * 0.5;
        acc += mean[i] * mean[i];
    }
    const double mean_len = std::sqrt(acc);
    const double max_len = std::max(norm(x_cur), norm(x_prev));
    std::vector<float> out(h, 0.0f);
    if (max_len == 0.0) return out;
    if (mean_len < eps_parallel * max_len) {
        throw Error(ErrorCode::DegenerateAntipodal, "mean of the pair vanishes");
    }
    for (std::size_t i = 0; i < h; ++i) out[i] = static_cast<float>(mean[i] / mean_len * max_len);
    return out;
}

} // namespace minicache

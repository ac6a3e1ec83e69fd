// Copyright (C) 2026 The MiniCache Engine Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Deterministic toy decoder: per layer x += softmax(q K^T) V W_o with
// q, k, v = x W_q, x W_k, x W_v. No norms, MLPs or positional terms.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "minicache/cache_engine.hpp"
#include "minicache/error.hpp"
#include "minicache/merge.hpp"
#include "minicache/tensor.hpp"

namespace minicache {

struct SimModelConfig {
    std::size_t layers = 4;
    std::size_t hidden = 16;
    std::uint64_t seed = 0;
    // Layer 2k+1 copies the projections of layer 2k and layer 2k writes
    // nothing to the residual stream, so each pair sees identical K/V.
    bool tied_pairs = false;
};

class SimModel {
public:
    struct LayerWeights {
        Matrix wq, wk, wv, wo;
    };

    explicit SimModel(const SimModelConfig& cfg) : m_cfg(cfg) {
        if (cfg.layers == 0 || cfg.hidden == 0) throw Error(ErrorCode::InvalidConfig, "layers and hidden must be positive");
        std::mt19937_64 rng(cfg.seed);
        std::normal_distribution<double> normal(0.0, 1.0);
        const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
        auto draw = [&] {
            Matrix m(cfg.hidden, cfg.hidden);
            for (float& x : m.data()) x = static_cast<float>(normal(rng) * scale);
            return m;
        };
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            if (cfg.tied_pairs && l % 2 == 1) {
                m_layers.push_back(m_tied_source);
                continue;
            }
            LayerWeights w{draw(), draw(), draw(), draw()};
            if (cfg.tied_pairs) {
                m_tied_source = w;
                w.wo = Matrix(cfg.hidden, cfg.hidden);
            }
            m_layers.push_back(std::move(w));
        }
    }

    const SimModelConfig& config() const noexcept { return m_cfg; }
    std::size_t layers() const noexcept { return m_layers.size(); }
    std::size_t hidden() const noexcept { return m_cfg.hidden; }
    const LayerWeights& layer(std::size_t l) const { return m_layers.at(l); }

private:
    SimModelConfig m_cfg;
    std::vector<LayerWeights> m_layers;
    LayerWeights m_tied_source;
};

// x W for a row vector x.
inline std::vector<float> project(std::span<const float> x, const Matrix& w) {
    std::vector<double> acc(w.cols(), 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        auto wr = w.row(i);
        for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += xi * wr[j];
    }
    return {acc.begin(), acc.end()};
}

// Query projection with the usual 1/sqrt(h) attention temperature folded in;
// the engine's attention itself is unscaled.
inline std::vector<float> query(std::span<const float> x, const Matrix& wq) {
    std::vector<float> q = project(x, wq);
    const double scale = 1.0 / std::sqrt(static_cast<double>(wq.cols()));
    for (float& v : q) v = static_cast<float>(v * scale);
    return q;
}

inline std::vector<float> rms_normalized(std::span<const float> x) {
    const double n = norm(x);
    std::vector<float> out(x.size(), 0.0f);
    if (n == 0.0) return out;
    const double scale = std::sqrt(static_cast<double>(x.size())) / n;
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>(x[i] * scale);
    return out;
}

struct PrefillOutput {
    KvDump dump;
    // RMS-normalized final hidden state of the last prompt token; the first
    // decode input.
    std::vector<float> next_input;
};

inline PrefillOutput run_prefill(const SimModel& model, const Matrix& prompt) {
    const std::size_t s = prompt.rows();
    const std::size_t h = model.hidden();
    if (s == 0) throw Error(ErrorCode::EmptyInput, "prompt must hold at least one token");
    if (prompt.cols() != h) throw Error(ErrorCode::ShapeMismatch, "prompt width does not match the model");

    PrefillOutput out;
    out.dump.dims = Dims{1, static_cast<std::uint32_t>(model.layers()), static_cast<std::uint32_t>(s),
                         static_cast<std::uint32_t>(h)};
    Matrix x = prompt;
    for (std::size_t l = 0; l < model.layers(); ++l) {
        const auto& w = model.layer(l);
        Matrix q(0, h), k(0, h), v(0, h);
        for (std::size_t i = 0; i < s; ++i) {
            q.append_row(query(x.row(i), w.wq));
            k.append_row(project(x.row(i), w.wk));
            v.append_row(project(x.row(i), w.wv));
        }
        Matrix next = x;
        for (std::size_t i = 0; i < s; ++i) {
            // causal: token i sees tokens 0..i
            auto ctx = attend(q.row(i), k.slice_rows(0, i + 1), v.slice_rows(0, i + 1));
            auto delta = project(ctx, w.wo);
            auto row = next.row(i);
            for (std::size_t j = 0; j < h; ++j) row[j] += delta[j];
        }
        out.dump.layers.push_back({std::move(k), std::move(v)});
        x = std::move(next);
    }
    out.next_input = rms_normalized(x.row(s - 1));
    return out;
}

/// Greedy unrolling: each step feeds the RMS-normalized final hidden state
/// back in. Returns the final hidden state of every step.
inline std::vector<std::vector<float>> run_decode(const SimModel& model, LayeredKvCache& cache,
                                                  std::vector<float> input, std::size_t steps) {
    if (cache.num_layers() != model.layers()) {
        throw Error(ErrorCode::LayerCountMismatch, "cache and model layer counts differ");
    }
    std::vector<std::vector<float>> states;
    for (std::size_t step = 0; step < steps; ++step) {
        std::vector<float> x = input;
        for (std::size_t l = 0; l < model.layers(); ++l) {
            const auto& w = model.layer(l);
            auto ctx = decode_step(cache, l, project(x, w.wk), project(x, w.wv), query(x, w.wq));
            auto delta = project(ctx, w.wo);
            for (std::size_t j = 0; j < x.size(); ++j) x[j] += delta[j];
        }
        input = rms_normalized(x);
        states.push_back(std::move(x));
    }
    return states;
}

/// Per-token angular distances between layers l and l+1 for one role. Tokens
/// where either row is zero have no defined angle and are skipped.
inline std::vector<float> pair_distances(const KvDump& dump, std::size_t l, Role role) {
    const auto& a = role == Role::Key ? dump.layers.at(l).key : dump.layers.at(l).value;
    const auto& b = role == Role::Key ? dump.layers.at(l + 1).key : dump.layers.at(l + 1).value;
    std::vector<float> out;
    for (std::size_t i = 0; i < a.rows(); ++i) {
        if (norm(a.row(i)) == 0.0 || norm(b.row(i)) == 0.0) continue;
        out.push_back(angular_distance(b.row(i), a.row(i)));
    }
    return out;
}

struct AdjacentSimilarity {
    // Mean angular distance of pair (l, l+1), index l.
    std::vector<double> key;
    std::vector<double> value;
};

inline AdjacentSimilarity adjacent_similarity(const KvDump& dump) {
    validate_dump(dump);
    if (dump.dims.layers < 2) throw Error(ErrorCode::EmptyInput, "adjacent similarity needs at least two layers");
    AdjacentSimilarity out;
    for (std::size_t l = 0; l + 1 < dump.layers.size(); ++l) {
        for (Role role : {Role::Key, Role::Value}) {
            const auto d = pair_distances(dump, l, role);
            double sum = 0.0;
            for (float x : d) sum += x;
            (role == Role::Key ? out.key : out.value).push_back(d.empty() ? 0.0 : sum / d.size());
        }
    }
    return out;
}

struct DivergenceReport {
    std::vector<double> max_abs_diff;
    std::vector<double> cosine;
    AdjacentSimilarity similarity;

    double worst_abs_diff() const {
        return max_abs_diff.empty() ? 0.0 : *std::max_element(max_abs_diff.begin(), max_abs_diff.end());
    }
};

inline DivergenceReport compare_traces(const std::vector<std::vector<float>>& reference,
                                       const std::vector<std::vector<float>>& candidate, const KvDump& dump) {
    if (reference.size() != candidate.size()) throw Error(ErrorCode::ShapeMismatch, "traces differ in length");
    DivergenceReport r;
    for (std::size_t s = 0; s < reference.size(); ++s) {
        const auto& a = reference[s];
        const auto& b = candidate[s];
        double worst = 0.0;
        for (std::size_t j = 0; j < a.size(); ++j) worst = std::max(worst, std::abs(double(a[j]) - b[j]));
        r.max_abs_diff.push_back(worst);
        const double na = norm(a), nb = norm(b);
        r.cosine.push_back(na == 0.0 || nb == 0.0 ? (na == nb ? 1.0 : 0.0)
                                                  : std::clamp(dot(a, b) / (na * nb), -1.0, 1.0));
    }
    if (dump.dims.layers >= 2) r.similarity = adjacent_similarity(dump);
    return r;
}

} // namespace minicache

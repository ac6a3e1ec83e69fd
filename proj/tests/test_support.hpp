// Copyright (C) 2026 The MiniCache Engine Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "minicache/tensor.hpp"

namespace minicache::testing {

inline Matrix random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
    std::normal_distribution<double> normal(0.0, scale);
    Matrix m(rows, cols);
    for (float& x : m.data()) x = static_cast<float>(normal(rng));
    return m;
}

inline std::vector<float> random_vector(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
    std::normal_distribution<double> normal(0.0, scale);
    std::vector<float> v(n);
    for (float& x : v) x = static_cast<float>(normal(rng));
    return v;
}

inline KvDump random_dump(std::mt19937_64& rng, std::uint32_t layers, std::uint32_t tokens, std::uint32_t hidden,
                          std::uint32_t batch = 1) {
    KvDump d;
    d.dims = Dims{batch, layers, tokens, hidden};
    for (std::uint32_t l = 0; l < layers; ++l) {
        d.layers.push_back({random_matrix(rng, std::size_t(batch) * tokens, hidden),
                            random_matrix(rng, std::size_t(batch) * tokens, hidden)});
    }
    return d;
}

// Layer 2k+1 is a copy of layer 2k.
inline KvDump duplicated_dump(std::mt19937_64& rng, std::uint32_t layers, std::uint32_t tokens,
                              std::uint32_t hidden) {
    KvDump d = random_dump(rng, layers, tokens, hidden);
    for (std::uint32_t l = 1; l < layers; l += 2) d.layers[l] = d.layers[l - 1];
    return d;
}

// Each layer is `factor` times the previous one plus small noise.
inline KvDump scaled_dump(std::mt19937_64& rng, std::uint32_t layers, std::uint32_t tokens, std::uint32_t hidden,
                          float factor, double noise) {
    KvDump d = random_dump(rng, 1, tokens, hidden);
    d.dims.layers = layers;
    std::normal_distribution<double> normal(0.0, noise);
    for (std::uint32_t l = 1; l < layers; ++l) {
        LayerKv next = d.layers.back();
        for (Matrix* m : {&next.key, &next.value}) {
            for (float& x : m->data()) x = static_cast<float>(factor * x + normal(rng));
        }
        d.layers.push_back(std::move(next));
    }
    return d;
}

inline double max_abs_diff(std::span<const float> a, std::span<const float> b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(double(a[i]) - b[i]));
    return worst;
}

} // namespace minicache::testing

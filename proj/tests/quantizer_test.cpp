// Copyright (C) 2026 The MiniCache Engine Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "minicache/quantizer.hpp"
#include "test_support.hpp"

using namespace minicache;
using minicache::testing::random_matrix;

TEST(Quantize, ZeroMatrix) {
    const Matrix z(3, 10);
    const auto q = quantize(z, QuantConfig{4, 4});
    for (auto c : q.codes) EXPECT_EQ(c, 0);
    for (float s : q.scales.data()) EXPECT_EQ(s, 1.0f);
    EXPECT_EQ(q.scales.cols(), 3u);
    EXPECT_EQ(dequantize(q), z);
}

TEST(Quantize, SingleGroupFourBit) {
    const Matrix m(1, 2, std::vector<float>{-1.0f, 1.0f});
    const auto q = quantize(m, QuantConfig{4, 32});
    EXPECT_FLOAT_EQ(q.scales(0, 0), 1.0f / 7.0f);
    EXPECT_EQ(q.codes[0], -7);
    EXPECT_EQ(q.codes[1], 7);
}

TEST(Quantize, CodesWithinRange) {
    std::mt19937_64 rng(41);
    const Matrix m = random_matrix(rng, 20, 50, 10.0);
    for (int bits : {4, 8}) {
        const QuantConfig cfg{bits, 16};
        const auto q = quantize(m, cfg);
        for (auto c : q.codes) {
            EXPECT_GE(c, cfg.qmin());
            EXPECT_LE(c, cfg.qmax());
        }
    }
}

TEST(Quantize, RoundTripWithinHalfStep) {
    std::mt19937_64 rng(42);
    const Matrix m = random_matrix(rng, 16, 37);
    for (int bits : {4, 8}) {
        for (std::size_t g : {1u, 5u, 8u, 37u, 64u}) {
            const QuantConfig cfg{bits, g};
            const auto q = quantize(m, cfg);
            const Matrix r = dequantize(q);
            for (std::size_t i = 0; i < m.rows(); ++i) {
                for (std::size_t j = 0; j < m.cols(); ++j) {
                    const double scale = q.scales(i, j / g);
                    EXPECT_LE(std::abs(double(r(i, j)) - m(i, j)), scale / 2 * (1 + 1e-6));
                }
            }
        }
    }
}

TEST(Quantize, RaggedFinalGroup) {
    const Matrix m(1, 5, std::vector<float>{1, 2, 3, 4, 10});
    const auto q = quantize(m, QuantConfig{8, 2});
    ASSERT_EQ(q.scales.cols(), 3u);
    EXPECT_FLOAT_EQ(q.scales(0, 2), 10.0f / 127.0f);
    EXPECT_EQ(q.codes[4], 127);
}

TEST(Quantize, EightBitUnitRows) {
    std::mt19937_64 rng(43);
    Matrix m = random_matrix(rng, 64, 32);
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const double n = norm(m.row(i));
        for (float& x : m.row(i)) x = static_cast<float>(x / n);
    }
    const Matrix r = dequantize(quantize(m, QuantConfig{8, 32}));
    double worst = 0;
    for (std::size_t k = 0; k < m.size(); ++k) worst = std::max(worst, std::abs(double(r.data()[k]) - m.data()[k]));
    EXPECT_LE(worst, (1.0 / 127) / 2 + 1e-7);
}

TEST(Quantize, FourBitErrorExceedsEightBit) {
    std::mt19937_64 rng(44);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix m = random_matrix(rng, 8, 64);
        const double e4 = frobenius_diff(dequantize(quantize(m, QuantConfig{4, 32})), m);
        const double e8 = frobenius_diff(dequantize(quantize(m, QuantConfig{8, 32})), m);
        EXPECT_GE(e4, e8);
        EXPECT_GT(e4, 0.0);
    }
}

TEST(QuantConfig, Validation) {
    EXPECT_THROW((QuantConfig{3, 32}.validate()), Error);
    EXPECT_THROW((QuantConfig{4, 0}.validate()), Error);
    EXPECT_EQ((QuantConfig{4, 32}.qmax()), 7);
    EXPECT_EQ((QuantConfig{4, 32}.qmin()), -8);
    EXPECT_EQ((QuantConfig{8, 32}.qmax()), 127);
    EXPECT_EQ((QuantConfig{8, 10}.groups(31)), 4u);
}

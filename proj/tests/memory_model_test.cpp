// Copyright (C) 2026 The MiniCache Engine Authors
// SPDX-License-Identifier: Apache-2.0

#include <random>

#include <gtest/gtest.h>

#include "minicache/memory_model.hpp"
#include "test_support.hpp"

using namespace minicache;
using minicache::testing::random_dump;

namespace {

MemoryInputs reference_inputs(double gamma = 0.05) {
    MemoryInputs mi;
    mi.batch = 1;
    mi.layers = 32;
    mi.hidden = 4096;
    mi.input_len = 128;
    mi.output_len = 128;
    mi.gamma = gamma;
    mi.bytes_per_scalar = 2;
    return mi;
}

MemoryInputs cache_inputs(std::size_t r, std::size_t h, std::size_t n, double gamma) {
    MemoryInputs mi;
    mi.batch = 1;
    mi.layers = static_cast<double>(r);
    mi.hidden = static_cast<double>(h);
    mi.input_len = static_cast<double>(n);
    mi.output_len = 0;
    mi.gamma = gamma;
    mi.bytes_per_scalar = 4;
    return mi;
}

EngineConfig engine(std::size_t L, std::size_t S, float gamma) {
    EngineConfig cfg = EngineConfig::for_layers(L);
    cfg.start_layer = S;
    cfg.retention.gamma = gamma;
    return cfg;
}

const ReconcileItem& item(const Reconciliation& rec, const std::string& name) {
    for (const auto& it : rec.items) {
        if (it.name == name) return it;
    }
    throw std::runtime_error("no item " + name);
}

} // namespace

TEST(AnalyticMemory, ReferenceInstance) {
    const auto r = analytic_memory(reference_inputs());
    EXPECT_EQ(r.full_cache, 134217728.0);
    // 8192 * (3.1 * 4096 + 2), evaluated independently of the model.
    const double brn = 1.0 * 32 * 256;
    EXPECT_EQ(r.total, brn * (3.1 * 4096 + 2));
    EXPECT_NEAR(r.total, 104035123.2, 1e-6);
    EXPECT_NEAR(r.compression_ratio, 1.290, 5e-4);
    EXPECT_EQ(r.merged_only, 3.0 * brn * 4096);
    EXPECT_NEAR(r.restoration_overhead, r.total - r.merged_only, 1e-12 * r.total);
}

TEST(AnalyticMemory, ClosingLineExact) {
    for (double h : {64.0, 1000.0, 4096.0, 5120.0, 8192.0}) {
        for (double b : {1.0, 4.0}) {
            MemoryInputs mi = reference_inputs();
            mi.hidden = h;
            mi.batch = b;
            const auto r = analytic_memory(mi);
            const double brn = mi.batch * mi.layers * mi.tokens();
            EXPECT_EQ(r.total / brn, 3.1 * h + 2) << "h=" << h;
        }
    }
}

TEST(AnalyticMemory, GammaZero) {
    const auto r = analytic_memory(reference_inputs(0.0));
    EXPECT_EQ(r.total, (3 * 4096.0 + 2) * 32 * 256);
}

TEST(AnalyticMemory, LargeHiddenLimit) {
    MemoryInputs mi = reference_inputs();
    mi.hidden = 1e6;
    EXPECT_NEAR(analytic_memory(mi).compression_ratio, 4.0 / 3.1, 1e-5);
    EXPECT_NEAR(4.0 / 3.1, 1.2903, 1e-4);
}

TEST(AnalyticMemory, MonotoneInGammaAndHidden) {
    double prev = 1e300;
    for (double g : {0.0, 0.01, 0.05, 0.1, 0.5, 1.0}) {
        const double r = analytic_memory(reference_inputs(g)).compression_ratio;
        EXPECT_LT(r, prev);
        prev = r;
    }
    prev = 0;
    for (double h : {16.0, 64.0, 512.0, 4096.0, 65536.0}) {
        MemoryInputs mi = reference_inputs();
        mi.hidden = h;
        const double r = analytic_memory(mi).compression_ratio;
        EXPECT_GT(r, prev);
        prev = r;
    }
}

TEST(AnalyticMemory, TotalBelowFull) {
    for (double r : {2.0, 4.0, 32.0}) {
        MemoryInputs mi = reference_inputs();
        mi.layers = r;
        const auto rep = analytic_memory(mi);
        EXPECT_LE(rep.total, rep.full_cache);
    }
}

TEST(AnalyticMemory, QuantizedDirectionsShrink) {
    MemoryInputs mi = reference_inputs();
    mi.bytes_per_scalar = 4;
    const double plain = analytic_memory(mi).scalars.directions;
    mi.quant = QuantConfig{4, 32};
    const auto q = analytic_memory(mi).scalars;
    EXPECT_EQ(q.directions, plain * 4.0 / 32.0);
    EXPECT_EQ(q.direction_scales, plain / 32.0);
}

TEST(AnalyticMemory, Validation) {
    MemoryInputs mi = reference_inputs();
    mi.gamma = 1.5;
    EXPECT_THROW((void)analytic_memory(mi), Error);
    mi = reference_inputs();
    mi.hidden = 0;
    EXPECT_THROW((void)analytic_memory(mi), Error);
}

TEST(Reconcile, OmegaTermIsTheOnlyDelta) {
    std::mt19937_64 rng(101);
    const auto cache = prefill(random_dump(rng, 4, 8, 16), engine(4, 2, 0.0f));
    const auto rec = reconcile(cache_inputs(4, 16, 8, 0.0), cache);
    EXPECT_EQ(rec.delta, 2.0 * 8);
    EXPECT_EQ(item(rec, "omegas").delta, 2.0 * 8);
    EXPECT_EQ(rec.unexplained, 0.0);
    EXPECT_EQ(rec.measured_total, static_cast<double>(stored_element_count(cache)));
}

TEST(Reconcile, NoMerging) {
    std::mt19937_64 rng(102);
    const auto cache = prefill(random_dump(rng, 4, 8, 16), engine(4, 4, 0.0f));
    const auto mi = cache_inputs(4, 16, 8, 0.0);
    const auto rec = reconcile(mi, cache);
    // A full standard cache is 2rhN scalars, i.e. full_cache / bytes_per_scalar.
    EXPECT_EQ(rec.measured_total, analytic_memory(mi).full_cache / mi.bytes_per_scalar);
    EXPECT_EQ(rec.unexplained, 0.0);
}

TEST(Reconcile, FullRetentionDelta) {
    std::mt19937_64 rng(103);
    const std::size_t n = 8, h = 16;
    const auto cache = prefill(random_dump(rng, 4, n, h), engine(4, 2, 1.0f));
    const auto rec = reconcile(cache_inputs(4, h, n, 0.05), cache);
    const auto& retained = item(rec, "retained_rows");
    EXPECT_EQ(retained.measured, static_cast<double>(n * h * 4));
    EXPECT_GT(rec.measured_total, rec.analytic_total);
    EXPECT_EQ(rec.unexplained, 0.0);
    EXPECT_EQ(rec.index_entries, n);
}

TEST(Reconcile, UnpairedTailItemized) {
    std::mt19937_64 rng(104);
    const auto cache = prefill(random_dump(rng, 5, 6, 4), engine(5, 2, 0.05f));
    const auto rec = reconcile(cache_inputs(5, 4, 6, 0.05), cache);
    EXPECT_EQ(item(rec, "unpaired_tail").measured, 2.0 * 6 * 4);
    EXPECT_EQ(rec.unexplained, 0.0);
}

TEST(Reconcile, QuantizedCodesScaled) {
    std::mt19937_64 rng(105);
    auto cfg = engine(4, 2, 0.0f);
    cfg.quant = QuantConfig{4, 8};
    const auto cache = prefill(random_dump(rng, 4, 8, 16), cfg);
    auto mi = cache_inputs(4, 16, 8, 0.0);
    mi.quant = cfg.quant;
    const auto rec = reconcile(mi, cache);
    const auto& dirs = item(rec, "merged_directions");
    EXPECT_EQ(dirs.measured, 2.0 * 8 * 16 * 4.0 / 32.0);
    EXPECT_EQ(dirs.delta, 0.0);
    EXPECT_EQ(item(rec, "direction_scales").delta, 0.0);
    EXPECT_EQ(rec.unexplained, 0.0);
}

TEST(Reconcile, BaselineMissingMagnitudesItemized) {
    std::mt19937_64 rng(106);
    auto cfg = engine(4, 2, 0.0f);
    cfg.merge_fn = MergeFn::Mean;
    const auto rec = reconcile(cache_inputs(4, 16, 8, 0.0), prefill(random_dump(rng, 4, 8, 16), cfg));
    EXPECT_EQ(item(rec, "magnitudes").delta, -4.0 * 8);
    EXPECT_EQ(rec.unexplained, 0.0);
}

TEST(Reconcile, DimsMismatch) {
    std::mt19937_64 rng(107);
    const auto cache = prefill(random_dump(rng, 4, 8, 16), engine(4, 2, 0.0f));
    try {
        (void)reconcile(cache_inputs(4, 16, 9, 0.0), cache);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::DimsMismatch);
    }
}

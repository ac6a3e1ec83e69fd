// Copyright (C) 2026 The MiniCache Engine Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "minicache/sim_decoder.hpp"
#include "test_support.hpp"

using namespace minicache;
using minicache::testing::random_dump;
using minicache::testing::random_matrix;

namespace {

EngineConfig engine(std::size_t L, std::size_t S, float gamma) {
    EngineConfig cfg = EngineConfig::for_layers(L);
    cfg.start_layer = S;
    cfg.retention.gamma = gamma;
    return cfg;
}

double worst(const DivergenceReport& r) { return r.worst_abs_diff(); }

struct Run {
    SimModel model;
    PrefillOutput pre;
};

Run make_run(std::size_t L, std::size_t h, std::size_t s, std::uint64_t seed, bool tied = false) {
    SimModel model(SimModelConfig{L, h, seed, tied});
    std::mt19937_64 rng(seed + 1000);
    auto pre = run_prefill(model, random_matrix(rng, s, h));
    return {std::move(model), std::move(pre)};
}

DivergenceReport diverge(const Run& run, const EngineConfig& cfg, std::size_t steps) {
    auto full = prefill(run.pre.dump, engine(cfg.num_layers, cfg.num_layers, 0.0f));
    auto mini = prefill(run.pre.dump, cfg);
    const auto a = run_decode(run.model, full, run.pre.next_input, steps);
    const auto b = run_decode(run.model, mini, run.pre.next_input, steps);
    return compare_traces(a, b, run.pre.dump);
}

} // namespace

TEST(SimModel, DeterministicWeights) {
    const SimModel a(SimModelConfig{3, 8, 7});
    const SimModel b(SimModelConfig{3, 8, 7});
    const SimModel c(SimModelConfig{3, 8, 8});
    for (std::size_t l = 0; l < 3; ++l) {
        EXPECT_EQ(a.layer(l).wq, b.layer(l).wq);
        EXPECT_EQ(a.layer(l).wo, b.layer(l).wo);
    }
    EXPECT_NE(a.layer(0).wk, c.layer(0).wk);
}

TEST(SimModel, WeightScale) {
    const SimModel m(SimModelConfig{1, 256, 3});
    double acc = 0;
    for (float x : m.layer(0).wk.data()) acc += double(x) * x;
    const double var = acc / (256.0 * 256.0);
    EXPECT_NEAR(var, 1.0 / 256.0, 0.1 / 256.0);
}

TEST(RunPrefill, SingleTokenMatchesScalarMatmul) {
    const SimModel m(SimModelConfig{2, 6, 9});
    std::mt19937_64 rng(9);
    const Matrix prompt = random_matrix(rng, 1, 6);
    const KvDump d = run_prefill(m, prompt).dump;
    for (std::size_t j = 0; j < 6; ++j) {
        long double acc = 0;
        for (std::size_t i = 0; i < 6; ++i) acc += static_cast<long double>(prompt(0, i)) * m.layer(0).wk(i, j);
        EXPECT_NEAR(d.layers[0].key(0, j), static_cast<double>(acc), 1e-6);
    }
}

TEST(RunPrefill, Deterministic) {
    const auto a = make_run(4, 8, 5, 3);
    const auto b = make_run(4, 8, 5, 3);
    EXPECT_EQ(a.pre.dump, b.pre.dump);
}

TEST(RunPrefill, ZeroPromptZeroStates) {
    const SimModel m(SimModelConfig{2, 4, 1});
    const KvDump d = run_prefill(m, Matrix(3, 4)).dump;
    for (float x : d.layers[0].key.data()) EXPECT_EQ(x, 0.0f);
    for (float x : d.layers[0].value.data()) EXPECT_EQ(x, 0.0f);
}

TEST(RunPrefill, RejectsEmptyPrompt) {
    const SimModel m(SimModelConfig{2, 4, 1});
    EXPECT_THROW((void)run_prefill(m, Matrix(0, 4)), Error);
}

TEST(RunPrefill, CausalPrefix) {
    // Later tokens do not change the states of earlier ones.
    const SimModel m(SimModelConfig{3, 8, 4});
    std::mt19937_64 rng(4);
    const Matrix prompt = random_matrix(rng, 6, 8);
    const KvDump full = run_prefill(m, prompt).dump;
    const KvDump prefix = run_prefill(m, prompt.slice_rows(0, 3)).dump;
    for (std::size_t l = 0; l < 3; ++l) EXPECT_EQ(full.layers[l].key.slice_rows(0, 3), prefix.layers[l].key);
}

TEST(RunDecode, NoMergingMatchesFull) {
    const auto run = make_run(6, 16, 8, 11);
    EXPECT_LE(worst(diverge(run, engine(6, 6, 0.05f), 8)), 1e-6);
}

TEST(RunDecode, FullRetentionMatchesFull) {
    const auto run = make_run(6, 16, 8, 12);
    EXPECT_LE(worst(diverge(run, engine(6, 0, 1.0f), 8)), 1e-5);
}

TEST(RunDecode, TiedPairsZeroDivergence) {
    const auto run = make_run(6, 16, 8, 13, true);
    for (std::size_t l = 1; l < 6; l += 2) EXPECT_EQ(run.pre.dump.layers[l], run.pre.dump.layers[l - 1]);
    EXPECT_LE(worst(diverge(run, engine(6, 0, 0.0f), 8)), 1e-5);
}

TEST(RunDecode, MergingDiverges) {
    const auto run = make_run(6, 16, 8, 14);
    EXPECT_GT(worst(diverge(run, engine(6, 0, 0.0f), 4)), 1e-3);
}

TEST(RunDecode, LayerCountChecked) {
    const auto run = make_run(4, 8, 3, 15);
    std::mt19937_64 rng(1);
    auto cache = prefill(random_dump(rng, 2, 3, 8), engine(2, 2, 0.0f));
    EXPECT_THROW((void)run_decode(run.model, cache, run.pre.next_input, 1), Error);
}

TEST(AdjacentSimilarity, IdenticalLayers) {
    std::mt19937_64 rng(16);
    KvDump d = random_dump(rng, 3, 5, 8);
    d.layers[1] = d.layers[0];
    d.layers[2] = d.layers[0];
    const auto s = adjacent_similarity(d);
    for (double x : s.key) EXPECT_NEAR(x, 0.0, 1e-3);
    for (double x : s.value) EXPECT_NEAR(x, 0.0, 1e-3);
}

TEST(AdjacentSimilarity, NegatedLayer) {
    std::mt19937_64 rng(17);
    KvDump d = random_dump(rng, 2, 5, 8);
    for (Matrix* m : {&d.layers[1].key, &d.layers[1].value}) {
        *m = m == &d.layers[1].key ? d.layers[0].key : d.layers[0].value;
        for (float& x : m->data()) x = -x;
    }
    const auto s = adjacent_similarity(d);
    EXPECT_NEAR(s.key[0], 1.0, 1e-6);
    EXPECT_NEAR(s.value[0], 1.0, 1e-6);
}

TEST(AdjacentSimilarity, MatchesPerTokenLoop) {
    std::mt19937_64 rng(18);
    const KvDump d = random_dump(rng, 4, 20, 16);
    const auto s = adjacent_similarity(d);
    ASSERT_EQ(s.key.size(), 3u);
    for (std::size_t l = 0; l < 3; ++l) {
        long double acc = 0;
        for (std::size_t i = 0; i < 20; ++i) {
            long double dp = 0, na = 0, nb = 0;
            for (std::size_t j = 0; j < 16; ++j) {
                const long double a = d.layers[l + 1].key(i, j), b = d.layers[l].key(i, j);
                dp += a * b;
                na += a * a;
                nb += b * b;
            }
            acc += std::acos(std::clamp(dp / std::sqrt(na * nb), -1.0L, 1.0L)) / std::numbers::pi_v<long double>;
        }
        EXPECT_NEAR(s.key[l], static_cast<double>(acc / 20), 1e-6);
    }
}

TEST(AdjacentSimilarity, NeedsTwoLayers) {
    std::mt19937_64 rng(19);
    EXPECT_THROW((void)adjacent_similarity(random_dump(rng, 1, 3, 4)), Error);
}

TEST(CompareTraces, CosineInRange) {
    const auto run = make_run(4, 8, 4, 20);
    const auto r = diverge(run, engine(4, 0, 0.0f), 6);
    for (double c : r.cosine) {
        EXPECT_GE(c, -1.0);
        EXPECT_LE(c, 1.0);
    }
    EXPECT_EQ(r.max_abs_diff.size(), 6u);
    EXPECT_EQ(r.similarity.key.size(), 3u);
}

TEST(ScaledDisparity, SlerpBeatsMean) {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        const KvDump d = minicache::testing::scaled_dump(rng, 4, 16, 16, 3.0f, 0.05);
        EngineConfig cfg = engine(4, 0, 0.0f);
        const double slerp = total_restoration_error(d, prefill(d, cfg));
        cfg.merge_fn = MergeFn::Mean;
        const double mean = total_restoration_error(d, prefill(d, cfg));
        EXPECT_LT(slerp, mean);
    }
}

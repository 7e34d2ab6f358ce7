/*
 * SPDX-FileCopyrightText: Copyright 2026 The scaforge Authors
 * SPDX-License-Identifier: Apache-2.0
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <gtest/gtest.h>

#include <cmath>

#include "scaforge/optim.hpp"
#include "scaforge/rng.hpp"
#include "scaforge/synth.hpp"

using namespace scaforge;

namespace {

ParamMap<double> scalar_params(double v) { return {{"p", Tensor<double>({1}, v)}}; }

ScheduleConfig schedule(ScheduleKind kind, std::size_t total) {
    ScheduleConfig s;
    s.kind = kind;
    s.total_steps = total;
    return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Schedules

TEST(Schedule, ConstantIsConstant) {
    auto s = schedule(ScheduleKind::Constant, 100);
    s.base_lr = 1e-5;
    for (std::size_t t : {0u, 1u, 50u, 100u}) EXPECT_EQ(schedule_value(s, t), 1e-5);
}

TEST(Schedule, ExpCosineStartsAtPeak) {
    auto s = schedule(ScheduleKind::ExpCosine, 1000);
    s.lr_max = 3e-3;
    EXPECT_DOUBLE_EQ(schedule_value(s, 0), 3e-3);
}

TEST(Schedule, ExpCosineHalvesAtHalfLife) {
    // T = 1000: P = 200, H = 500. t = 400 and 600 are multiples of P; the
    // envelope ratio over one period is 2^(-P/H).
    auto s = schedule(ScheduleKind::ExpCosine, 1000);
    s.lr_max = 1.0;
    s.half_life_frac = 0.4;  // H = 400, a multiple of P
    EXPECT_NEAR(schedule_value(s, 400), 0.5, 1e-15);
    s.half_life_frac = 0.5;
    const double r = schedule_value(s, 600) / schedule_value(s, 400);
    EXPECT_NEAR(r, std::pow(2.0, -200.0 / 500.0), 1e-14);
    // Half a period in, the cosine factor vanishes.
    EXPECT_NEAR(schedule_value(s, 100), 0.0, 1e-17);
}

TEST(Schedule, OneCyclePeakAndEnds) {
    auto s = schedule(ScheduleKind::OneCycleLinear, 1000);
    s.lr_max = 1e-3;
    s.div = 10;
    s.final_div = 100;
    s.pct_peak = 0.4;
    EXPECT_DOUBLE_EQ(schedule_value(s, 400), 1e-3);
    EXPECT_DOUBLE_EQ(schedule_value(s, 0), 1e-4);
    EXPECT_NEAR(schedule_value(s, 1000), 1e-6, 1e-18);
    EXPECT_NEAR(schedule_value(s, 200), 0.5 * (1e-4 + 1e-3), 1e-18);
    EXPECT_NEAR(schedule_value(s, 700), 0.5 * (1e-3 + 1e-6), 1e-18);
}

TEST(Schedule, TotalOnRangeAndOutOfRangeBeyond) {
    for (auto kind : {ScheduleKind::OneCycleLinear, ScheduleKind::ExpCosine}) {
        const auto s = schedule(kind, 37);
        for (std::size_t t = 0; t <= 37; ++t) {
            const double v = schedule_value(s, t);
            EXPECT_TRUE(std::isfinite(v) && v >= 0.0);
            EXPECT_EQ(v, schedule_value(s, t));
        }
        EXPECT_THROW(schedule_value(s, 38), OutOfRange);
    }
}

TEST(Schedule, ParseNamesAndValidation) {
    EXPECT_EQ(parse_schedule_kind("exp_cosine"), ScheduleKind::ExpCosine);
    EXPECT_EQ(parse_schedule_kind(to_string(ScheduleKind::OneCycleLinear)), ScheduleKind::OneCycleLinear);
    EXPECT_THROW(parse_schedule_kind("cosine"), InvalidConfig);
    auto s = schedule(ScheduleKind::OneCycleLinear, 10);
    s.pct_peak = 1.0;
    EXPECT_THROW(s.validate(), InvalidConfig);
    s = schedule(ScheduleKind::ExpCosine, 0);
    EXPECT_THROW(s.validate(), InvalidConfig);
}

// ---------------------------------------------------------------------------
// Optimizers

TEST(Optimizer, AdamFirstStepMovesByLr) {
    auto p = scalar_params(0.0);
    OptimizerState<double> st;
    opt_step(OptimizerConfig::adam(0.1), st, p, scalar_params(1.0), 0.1);
    // m_hat = 1, v_hat = 1: the step is lr / (1 + eps).
    EXPECT_NEAR(p["p"][0], -0.1 / (1.0 + 1e-8), 1e-15);
    EXPECT_EQ(st.step, 1u);
}

TEST(Optimizer, RmsPropStepConvergesToLr) {
    auto p = scalar_params(0.0);
    OptimizerState<double> st;
    const auto cfg = OptimizerConfig::rmsprop(0.01);
    double prev = 0.0, step = 0.0;
    for (int i = 0; i < 500; ++i) {
        opt_step(cfg, st, p, scalar_params(3.0), 0.01);
        step = prev - p["p"][0];
        prev = p["p"][0];
    }
    // v -> g^2 = 9, so the step -> lr * 3 / (3 + eps).
    EXPECT_NEAR(step, 0.01 * 3.0 / (3.0 + 1e-7), 1e-12);
}

TEST(Optimizer, RmsPropMatchesHandRecursion) {
    auto p = scalar_params(1.0);
    OptimizerState<double> st;
    const auto cfg = OptimizerConfig::rmsprop(0.05, 0.8, 1e-7);
    double v = 0, x = 1.0;
    for (double g : {0.5, -2.0, 1.0}) {
        opt_step(cfg, st, p, scalar_params(g), 0.05);
        v = 0.8 * v + 0.2 * g * g;
        x -= 0.05 * g / (std::sqrt(v) + 1e-7);
        EXPECT_NEAR(p["p"][0], x, 1e-15);
    }
}

TEST(Optimizer, AdamMatchesHandRecursion) {
    auto p = scalar_params(0.3);
    OptimizerState<double> st;
    const auto cfg = OptimizerConfig::adam(0.01, 0.9, 0.99, 1e-8);
    double m = 0, v = 0, x = 0.3;
    int t = 0;
    for (double g : {1.0, -0.5, 0.25, 4.0}) {
        opt_step(cfg, st, p, scalar_params(g), 0.01);
        ++t;
        m = 0.9 * m + 0.1 * g;
        v = 0.99 * v + 0.01 * g * g;
        x -= 0.01 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.99, t))) + 1e-8);
        EXPECT_NEAR(p["p"][0], x, 1e-14);
    }
}

TEST(Optimizer, ZeroGradientLeavesParamsAndDecaysState) {
    for (auto cfg : {OptimizerConfig::adam(0.1), OptimizerConfig::rmsprop(0.1)}) {
        auto p = scalar_params(2.0);
        OptimizerState<double> st;
        opt_step(cfg, st, p, scalar_params(1.0), 0.1);
        const double after_one = p["p"][0];
        const double v1 = st.second["p"][0];
        opt_step(cfg, st, p, scalar_params(0.0), 0.0);
        EXPECT_EQ(p["p"][0], after_one);
        EXPECT_LT(st.second["p"][0], v1);
    }
}

TEST(Optimizer, ZeroLrIsIdentity) {
    ParamMap<double> p{{"w", Tensor<double>({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6})}};
    const auto before = p;
    Gradients<double> g{{"w", Tensor<double>({2, 3}, std::vector<double>{-1, 0.5, 9, 1e3, -7, 2})}};
    OptimizerState<double> st;
    for (auto cfg : {OptimizerConfig::adam(1.0), OptimizerConfig::rmsprop(1.0)}) {
        for (int i = 0; i < 3; ++i) opt_step(cfg, st, p, g, 0.0);
        EXPECT_EQ(p, before);
    }
}

TEST(Optimizer, NonFiniteGradientTouchesNothing) {
    ParamMap<double> p{{"a", Tensor<double>({2}, 1.0)}, {"b", Tensor<double>({2}, 1.0)}};
    const auto before = p;
    Gradients<double> g{{"a", Tensor<double>({2}, 1.0)}, {"b", Tensor<double>({2}, std::vector<double>{1, NAN})}};
    OptimizerState<double> st;
    EXPECT_THROW(opt_step(OptimizerConfig::adam(0.1), st, p, g, 0.1), NonFiniteGradient);
    EXPECT_EQ(p, before);
    EXPECT_EQ(st.step, 0u);
    g["b"][1] = INFINITY;
    EXPECT_THROW(opt_step(OptimizerConfig::rmsprop(0.1), st, p, g, 0.1), NonFiniteGradient);
}

TEST(Optimizer, ShapeMismatch) {
    ParamMap<double> p{{"a", Tensor<double>({2}, 1.0)}};
    OptimizerState<double> st;
    EXPECT_THROW(opt_step(OptimizerConfig::adam(0.1), st, p, Gradients<double>{{"a", Tensor<double>({3}, 1.0)}}, 0.1),
                 ShapeMismatch);
    EXPECT_THROW(opt_step(OptimizerConfig::adam(0.1), st, p, Gradients<double>{{"z", Tensor<double>({2}, 1.0)}}, 0.1),
                 ShapeMismatch);
}

TEST(Optimizer, ConfigValidation) {
    EXPECT_THROW(OptimizerConfig::adam(0.1, 1.0).validate(), InvalidConfig);
    EXPECT_THROW(OptimizerConfig::rmsprop(0.1, 0.0).validate(), InvalidConfig);
    EXPECT_THROW(OptimizerConfig::adam(0.1, 0.9, 0.999, 0.0).validate(), InvalidConfig);
    EXPECT_NO_THROW(OptimizerConfig::rmsprop(1e-5).validate());
}

// ---------------------------------------------------------------------------
// SWA

TEST(Swa, FirstUpdateCopies) {
    SwaState<double> s;
    swa_update(s, scalar_params(4.5));
    EXPECT_EQ(s.averaged.at("p")[0], 4.5);
    EXPECT_EQ(s.n_models, 1u);
}

TEST(Swa, MeanOfTwo) {
    SwaState<double> s;
    swa_update(s, scalar_params(0.0));
    swa_update(s, scalar_params(2.0));
    EXPECT_EQ(s.averaged.at("p")[0], 1.0);
}

TEST(Swa, MatchesDirectMean) {
    Rng rng(21);
    std::vector<ParamMap<double>> snaps;
    for (int k = 0; k < 5; ++k) {
        ParamMap<double> p{{"a", Tensor<double>({4, 3})}, {"b", Tensor<double>({7})}};
        for (auto& [n, t] : p)
            for (auto& v : t.data) v = 10 * rng.normal();
        snaps.push_back(p);
    }
    SwaState<double> s;
    for (const auto& p : snaps) swa_update(s, p);
    double worst = 0;
    for (const auto& [name, avg] : s.averaged)
        for (std::size_t i = 0; i < avg.size(); ++i) {
            double direct = 0;
            for (const auto& p : snaps) direct += p.at(name)[i];
            worst = std::max(worst, std::abs(avg[i] - direct / 5));
        }
    EXPECT_LT(worst, 1e-12);
}

TEST(Swa, ShapeMismatch) {
    SwaState<double> s;
    swa_update(s, scalar_params(1.0));
    EXPECT_THROW(swa_update(s, ParamMap<double>{{"p", Tensor<double>({2})}}), ShapeMismatch);
    EXPECT_THROW(swa_update(s, ParamMap<double>{{"q", Tensor<double>({1})}}), ShapeMismatch);
}

// ---------------------------------------------------------------------------
// Learning-rate scaling and finder

TEST(ScaleLr, Examples) {
    EXPECT_EQ(scale_lr(1e-3, 50, 50), 1e-3);
    EXPECT_DOUBLE_EQ(scale_lr(1e-3, 400, 50), 8e-3);
    EXPECT_DOUBLE_EQ(scale_lr(scale_lr(2.5e-4, 400), 50, 400), 2.5e-4);
    EXPECT_THROW(scale_lr(1e-3, 0), InvalidConfig);
}

TEST(LrFind, QuadraticBowlSuggestsNearStableRate) {
    // Gradient descent on 1/2 |p|^2 contracts for lr < 2 and is fastest at 1.
    std::vector<double> p(10, 1.0);
    auto step = [&](std::size_t, double lr) {
        double loss = 0;
        for (double v : p) loss += 0.5 * v * v;
        for (double& v : p) v -= lr * v;
        return loss;
    };
    LrFindConfig cfg;
    cfg.lr_min = 1e-4;
    cfg.lr_max = 100;
    cfg.n_steps = 100;
    const auto curve = lr_find(step, cfg);
    ASSERT_TRUE(curve.truncated_at.has_value());
    EXPECT_GT(curve.suggestion, 0.1);
    EXPECT_LT(curve.suggestion, 10.0);
}

TEST(LrFind, GridEndpoints) {
    LrFindConfig cfg;
    cfg.lr_min = 1e-5;
    cfg.lr_max = 1.0;
    cfg.n_steps = 11;
    std::vector<double> seen;
    const auto curve = lr_find(
        [&](std::size_t, double lr) {
            seen.push_back(lr);
            return 1.0;
        },
        cfg);
    EXPECT_FALSE(curve.truncated_at);
    ASSERT_EQ(curve.lrs.size(), 11u);
    EXPECT_EQ(curve.lrs.front(), 1e-5);
    EXPECT_EQ(curve.lrs.back(), 1.0);
    EXPECT_NEAR(curve.lrs[5], 1e-5 * std::pow(1e5, 0.5), 1e-15);
    EXPECT_EQ(seen.size(), 11u);
    for (double s : curve.smoothed) EXPECT_NEAR(s, 1.0, 1e-12);  // bias correction
}

TEST(LrFind, NonFiniteLossTruncates) {
    LrFindConfig cfg;
    cfg.n_steps = 30;
    const auto curve = lr_find([](std::size_t i, double) { return i == 17 ? NAN : 2.0; }, cfg);
    ASSERT_TRUE(curve.truncated_at);
    EXPECT_EQ(*curve.truncated_at, 17u);
    EXPECT_EQ(curve.lrs.size(), 17u);
    EXPECT_EQ(curve.raw_losses.size(), 17u);
}

TEST(LrFind, DivergenceTruncates) {
    LrFindConfig cfg;
    cfg.n_steps = 50;
    cfg.ema_beta = 0.0;  // smoothed == raw
    const auto curve = lr_find([](std::size_t i, double) { return i < 20 ? 1.0 : 4.5; }, cfg);
    ASSERT_TRUE(curve.truncated_at);
    EXPECT_EQ(*curve.truncated_at, 20u);
}

TEST(LrFind, ImmediateDivergence) {
    LrFindConfig cfg;
    EXPECT_THROW(lr_find([](std::size_t i, double) { return i == 3 ? INFINITY : 1.0; }, cfg), DivergedImmediately);
    cfg.n_steps = 5;
    EXPECT_THROW(cfg.validate(), InvalidConfig);
}

TEST(LrFind, ModelSweepIsBoundedAndLeavesModelAlone) {
    SynthConfig sc;
    sc.n_traces = 200;
    sc.n_samples = 16;
    sc.leak_pos_masked = 5;
    sc.leak_pos_mask = 10;
    sc.seed = 2;
    const auto ts = generate(sc);
    ModelConfig mc;
    mc.name = "t";
    mc.input_width = 16;
    mc.layers = {LayerSpec::dense(8), LayerSpec::relu(), LayerSpec::head()};
    const auto model = build_model<double>(mc, 1);
    const auto copy = model;
    LrFindConfig cfg;
    cfg.n_steps = 20;
    cfg.lr_min = 1e-6;
    cfg.lr_max = 1e-1;
    const auto curve = lr_find(model, ts, OptimizerConfig::adam(1e-3), 32, cfg, 9);
    EXPECT_LE(curve.lrs.size(), 20u);
    EXPECT_GE(curve.lrs.size(), 5u);
    EXPECT_EQ(model.params, copy.params);
    EXPECT_NEAR(curve.raw_losses.front(), std::log(256.0), 0.5);
    const auto again = lr_find(model, ts, OptimizerConfig::adam(1e-3), 32, cfg, 9);
    EXPECT_EQ(again.raw_losses, curve.raw_losses);
}

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
#include <numeric>

#include "scaforge/nn.hpp"
#include "scaforge/rng.hpp"

using namespace scaforge;

namespace {

template <class T>
Tensor<T> random_batch(std::size_t b, std::size_t s, std::uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    Tensor<T> x({b, s});
    for (auto& v : x.data) v = static_cast<T>(scale * rng.normal());
    return x;
}

std::vector<std::uint8_t> random_labels(std::size_t b, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::uint8_t> y(b);
    for (auto& v : y) v = rng.byte();
    return y;
}

ModelConfig config(std::size_t width, std::vector<LayerSpec> layers) {
    ModelConfig c;
    c.name = "test";
    c.input_width = width;
    c.layers = std::move(layers);
    return c;
}

double max_abs(const Gradients<double>& g) {
    double m = 0;
    for (const auto& [n, t] : g)
        for (double v : t.data) m = std::max(m, std::abs(v));
    return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configs and presets

TEST(Presets, MlpAscadParameterCount) {
    const auto cfg = load_preset("mlp_ascad", 700);
    const std::size_t expected = 700 * 200 + 200 + 5 * (200 * 200 + 200) + 200 * 256 + 256;
    EXPECT_EQ(expected, 392656u);
    EXPECT_EQ(parameter_count(cfg), expected);
    std::size_t built = 0;
    for (const auto& [n, t] : build_model<float>(cfg, 1).params) built += t.size();
    EXPECT_EQ(built, expected);
}

TEST(Presets, VggCnnBestParameterCount) {
    const auto cfg = load_preset("vgg_cnn_best", 700);
    std::size_t expected = 0, channels = 1, length = 700;
    for (std::size_t f : {64, 128, 256, 512, 512}) {
        expected += channels * f * 11 + f + 2 * f;  // conv + batchnorm
        channels = f;
        length /= 2;
    }
    std::size_t features = channels * length;
    for (int i = 0; i < 2; ++i) {
        expected += features * 4096 + 4096 + 2 * 4096;
        features = 4096;
    }
    expected += features * 256 + 256;
    EXPECT_EQ(parameter_count(cfg), expected);
}

TEST(Presets, ShallowCnnForwardShape) {
    const auto cfg = load_preset("shallow_cnn", 700);
    auto model = build_model<float>(cfg, 3);
    const auto logits = forward(model, random_batch<float>(4, 700, 1));
    EXPECT_EQ(logits.shape, (std::vector<std::size_t>{4, 256}));
}

TEST(Presets, UnknownPreset) { EXPECT_THROW(load_preset("nope", 10), InvalidConfig); }

TEST(ModelConfigJson, RoundTrip) {
    const auto cfg = load_preset("shallow_cnn", 700);
    const auto back = model_config_from_json(nlohmann::json::parse(to_json(cfg).dump()));
    EXPECT_EQ(back, cfg);
}

TEST(Shapes, MismatchNamesLayer) {
    auto cfg = config(10, {LayerSpec::conv1d(2, 20), LayerSpec::flatten(), LayerSpec::head()});
    try {
        infer_shapes(cfg);
        FAIL() << "expected ShapeMismatch";
    } catch (const ShapeMismatch& e) {
        EXPECT_NE(std::string(e.what()).find("layer 0"), std::string::npos) << e.what();
    }
    EXPECT_THROW(infer_shapes(config(10, {LayerSpec::dense(4)})), ShapeMismatch);
    EXPECT_THROW(infer_shapes(config(10, {LayerSpec::head(), LayerSpec::relu()})), ShapeMismatch);
    EXPECT_THROW(infer_shapes(config(10, {LayerSpec::head(10)})), ShapeMismatch);
}

TEST(Shapes, ValidConvLengthFormula) {
    Rng rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t s = 5 + rng.below(200);
        const std::size_t k = 1 + rng.below(s);
        const std::size_t stride = 1 + rng.below(7);
        std::size_t windows = 0;
        for (std::size_t start = 0; start + k <= s; start += stride) ++windows;
        EXPECT_EQ(conv_valid_length(s, k, stride), windows);
        EXPECT_EQ(conv_valid_length(s, k, stride), (s - k) / stride + 1);
        const auto shapes = infer_shapes(config(s, {LayerSpec::conv1d(1, k, stride), LayerSpec::flatten(), LayerSpec::head()}));
        EXPECT_EQ(shapes[1].length, windows);
    }
}

// ---------------------------------------------------------------------------
// Construction and forward

TEST(Model, SameSeedSameParameters) {
    const auto cfg = load_preset("shallow_cnn", 100);
    EXPECT_EQ(build_model<float>(cfg, 5).params, build_model<float>(cfg, 5).params);
    EXPECT_NE(build_model<float>(cfg, 5).params, build_model<float>(cfg, 6).params);
}

TEST(Forward, ZeroInputZeroBiasGivesZeroLogits) {
    auto model = build_model<double>(config(12, {LayerSpec::dense(8), LayerSpec::relu(), LayerSpec::dense(8), LayerSpec::head()}), 2);
    const auto logits = forward(model, Tensor<double>({3, 12}));
    for (double v : logits.data) EXPECT_EQ(v, 0.0);
}

TEST(Forward, ValidConvIsTranslationEquivariant) {
    // Probe the conv output directly through an identity-like head-free chain.
    const std::size_t S = 30, K = 5;
    const auto cfg = config(S, {LayerSpec::conv1d(3, K), LayerSpec::flatten(), LayerSpec::head()});
    const auto model = build_model<double>(cfg, 9);
    auto x = random_batch<double>(1, S, 4);
    Tensor<double> shifted({1, S});
    for (std::size_t t = 1; t < S; ++t) shifted[t] = x[t - 1];
    shifted[0] = 123.0;

    Tape<double> ta, tb;
    PassOptions<double> oa, ob;
    oa.tape = &ta;
    ob.tape = &tb;
    forward_pass(model, x, oa);
    forward_pass(model, shifted, ob);
    // Input to layer 1 (flatten) is the conv output, channels x length.
    const auto& ya = ta.layers[1].input;
    const auto& yb = tb.layers[1].input;
    const std::size_t L = S - K + 1;
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t t = 1; t < L; ++t) EXPECT_NEAR(yb[c * L + t], ya[c * L + t - 1], 1e-12);
}

TEST(Forward, SamePaddingIsLeftBiased) {
    // Kernel 4 needs 3 padding zeros: 2 on the left, 1 on the right.
    auto model = build_model<double>(config(5, {LayerSpec::conv1d(1, 4, 1, Padding::Same), LayerSpec::flatten(), LayerSpec::head()}), 1);
    auto& w = model.params.at(param_name(0, LayerKind::Conv1d, "w"));
    std::fill(w.data.begin(), w.data.end(), 0.0);
    w[0] = 1.0;  // output[t] = padded[t], i.e. input[t - 2]
    const Tensor<double> x({1, 5}, std::vector<double>{1, 2, 3, 4, 5});
    Tape<double> tape;
    PassOptions<double> opts;
    opts.tape = &tape;
    forward_pass(model, x, opts);
    const auto& y = tape.layers[1].input;
    ASSERT_EQ(y.size(), 5u);
    EXPECT_EQ(y.data, (std::vector<double>{0, 0, 1, 2, 3}));
}

TEST(Forward, BatchnormTrainNormalizesPerChannel) {
    const auto cfg = config(40, {LayerSpec::conv1d(3, 5), LayerSpec::batchnorm(), LayerSpec::flatten(), LayerSpec::head()});
    auto model = build_model<double>(cfg, 3);
    Tape<double> tape;
    forward(model, random_batch<double>(16, 40, 8, 3.0), &tape);
    const auto& y = tape.layers[2].input;  // batchnorm output
    const std::size_t L = 36;
    for (std::size_t c = 0; c < 3; ++c) {
        double m = 0, v = 0;
        for (std::size_t b = 0; b < 16; ++b)
            for (std::size_t t = 0; t < L; ++t) m += y[b * 3 * L + c * L + t];
        m /= 16.0 * L;
        for (std::size_t b = 0; b < 16; ++b)
            for (std::size_t t = 0; t < L; ++t) v += std::pow(y[b * 3 * L + c * L + t] - m, 2);
        v /= 16.0 * L;
        EXPECT_NEAR(m, 0.0, 1e-5);
        EXPECT_NEAR(v, 1.0, 1e-3);
    }
    // Running statistics moved away from their initial values.
    EXPECT_NE(model.bn_state.at(param_name(1, LayerKind::BatchNorm, "running_mean"))[0], 0.0);
}

TEST(Forward, BatchnormInferIsDeterministicAffine) {
    const auto cfg = config(10, {LayerSpec::dense(6), LayerSpec::batchnorm(), LayerSpec::relu(), LayerSpec::head()});
    auto model = build_model<double>(cfg, 3);
    forward(model, random_batch<double>(8, 10, 1));
    model.mode = Mode::Infer;
    const auto state = model.bn_state;
    const auto x = random_batch<double>(5, 10, 2);
    const auto a = forward(model, x);
    const auto b = forward(model, x);
    EXPECT_EQ(a, b);
    EXPECT_EQ(model.bn_state, state);
    // Row independence: inference on a single row matches the batch row.
    Tensor<double> row({1, 10}, std::vector<double>(x.data.begin(), x.data.begin() + 10));
    const auto r = forward(model, row);
    for (std::size_t k = 0; k < 256; ++k) EXPECT_EQ(r[k], a[k]);
}

TEST(Forward, WrongWidth) {
    auto model = build_model<float>(config(10, {LayerSpec::head()}), 1);
    EXPECT_THROW(forward(model, Tensor<float>({2, 11})), ShapeMismatch);
}

// ---------------------------------------------------------------------------
// Loss

TEST(Loss, UniformLogitsGiveLn256) {
    const auto r = loss_ce(Tensor<double>({4, 256}), std::vector<std::uint8_t>{0, 1, 2, 255});
    EXPECT_NEAR(r.loss, std::log(256.0), 1e-12);
    EXPECT_NEAR(r.loss, 5.5452, 1e-4);
    const auto f = loss_ce(Tensor<float>({1, 256}, 3.5f), std::vector<std::uint8_t>{7});
    EXPECT_NEAR(f.loss, 5.5452, 1e-4);
}

TEST(Loss, DecreasesAsTrueLogitGrows) {
    double prev = 1e9;
    for (double m = 0; m < 30; m += 0.5) {
        Tensor<double> z({1, 256});
        z[17] = m;
        const double l = loss_ce(z, std::vector<std::uint8_t>{17}).loss;
        EXPECT_LT(l, prev);
        prev = l;
    }
}

TEST(Loss, GradientRowsSumToZeroAndMatchFiniteDifferences) {
    auto z = random_batch<double>(3, 256, 5, 4.0);
    const std::vector<std::uint8_t> y{3, 200, 77};
    const auto r = loss_ce(z, y);
    for (std::size_t b = 0; b < 3; ++b) {
        double s = 0;
        for (std::size_t k = 0; k < 256; ++k) s += r.dlogits[b * 256 + k];
        EXPECT_LT(std::abs(s), 1e-6);
    }
    // Independent extended-precision CE as the finite-difference oracle.
    auto ce = [&](const std::vector<long double>& zz) {
        long double total = 0;
        for (std::size_t b = 0; b < 3; ++b) {
            long double sum = 0;
            for (std::size_t k = 0; k < 256; ++k) sum += std::exp(zz[b * 256 + k]);
            total += std::log(sum) - zz[b * 256 + y[b]];
        }
        return total / 3;
    };
    std::vector<long double> zw(z.data.begin(), z.data.end());
    const long double h = 1e-5L;
    double worst = 0;
    for (std::size_t i = 0; i < zw.size(); i += 7) {
        const long double orig = zw[i];
        zw[i] = orig + h;
        const long double up = ce(zw);
        zw[i] = orig - h;
        const long double down = ce(zw);
        zw[i] = orig;
        const auto num = static_cast<double>((up - down) / (2 * h));
        worst = std::max(worst, std::abs(num - r.dlogits[i]) / std::max({std::abs(num), std::abs(r.dlogits[i]), 1e-7}));
    }
    EXPECT_LT(worst, 1e-6);
}

TEST(Loss, StableForHugeLogits) {
    Tensor<float> z({1, 256});
    z[0] = 1e30f;
    const auto r = loss_ce(z, std::vector<std::uint8_t>{1});
    EXPECT_TRUE(std::isfinite(r.loss));
}

// ---------------------------------------------------------------------------
// Backward

TEST(Backward, SaturatedCorrectLogitsGiveTinyGradients) {
    auto model = build_model<double>(config(4, {LayerSpec::head()}), 1);
    auto& w = model.params.at(param_name(0, LayerKind::SoftmaxCeHead, "w"));
    auto& b = model.params.at(param_name(0, LayerKind::SoftmaxCeHead, "b"));
    std::fill(w.data.begin(), w.data.end(), 0.0);
    b[42] = 60.0;
    const auto r = compute_gradients(model, random_batch<double>(3, 4, 2), std::vector<std::uint8_t>{42, 42, 42});
    EXPECT_LT(r.loss, 1e-20);
    EXPECT_LT(max_abs(r.grads), 1e-6);
}

TEST(Backward, DuplicatedRowsGiveIdenticalGradients) {
    const auto cfg = config(16, {LayerSpec::conv1d(2, 3), LayerSpec::relu(), LayerSpec::maxpool(2), LayerSpec::flatten(),
                                 LayerSpec::dense(8), LayerSpec::relu(), LayerSpec::head()});
    auto model = build_model<double>(cfg, 4);
    const auto x = random_batch<double>(3, 16, 3);
    const auto y = random_labels(3, 4);
    Tensor<double> x2({6, 16});
    std::vector<std::uint8_t> y2;
    for (std::size_t r = 0; r < 6; ++r) {
        std::copy_n(x.data.begin() + static_cast<std::ptrdiff_t>((r % 3) * 16), 16, x2.data.begin() + static_cast<std::ptrdiff_t>(r * 16));
        y2.push_back(y[r % 3]);
    }
    const auto a = compute_gradients(model, x, y);
    const auto b = compute_gradients(model, x2, y2);
    EXPECT_NEAR(a.loss, b.loss, 1e-14);
    for (const auto& [name, g] : a.grads)
        for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], b.grads.at(name)[i], 1e-14) << name;
}

TEST(Backward, InputGradientMatchesFiniteDifferences) {
    const auto cfg = config(12, {LayerSpec::conv1d(2, 3, 1, Padding::Same), LayerSpec::relu(), LayerSpec::avgpool(2),
                                 LayerSpec::flatten(), LayerSpec::dense(5), LayerSpec::relu(), LayerSpec::head()});
    auto model = build_model<double>(cfg, 7);
    model.mode = Mode::Infer;
    auto x = random_batch<double>(2, 12, 8);
    const auto y = random_labels(2, 9);
    Tape<double> tape;
    PassOptions<double> opts;
    opts.tape = &tape;
    const auto r = loss_ce(forward_pass(model, x, opts), y);
    Tensor<double> dx;
    backward(model, tape, r.dlogits, &dx);
    const double h = 1e-6;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + h;
        const double up = evaluate_loss(model, x, y);
        x[i] = orig - h;
        const double down = evaluate_loss(model, x, y);
        x[i] = orig;
        EXPECT_NEAR((up - down) / (2 * h), dx[i], 1e-7 + 1e-5 * std::abs(dx[i]));
    }
}

// ---------------------------------------------------------------------------
// Gradient check harness

TEST(GradCheck, LinearModel) {
    const auto model = build_model<double>(config(20, {LayerSpec::head()}), 11);
    const auto res = grad_check(model, random_batch<double>(8, 20, 1), random_labels(8, 2), 1e-3, 20, 3);
    EXPECT_LT(res.max_rel_error, 1e-9) << res.worst_param << "[" << res.worst_index << "]";
    EXPECT_EQ(res.checked, 40u);
}

TEST(GradCheck, MlpAscadReducedWidth) {
    const auto model = build_model<double>(load_preset("mlp_ascad", 128), 12);
    const auto res = grad_check(model, random_batch<double>(8, 128, 2), random_labels(8, 3), 1e-6, 20, 4);
    EXPECT_LT(res.max_rel_error, 1e-4) << res.worst_param << "[" << res.worst_index << "]";
}

TEST(GradCheck, ShallowCnn) {
    const auto model = build_model<double>(load_preset("shallow_cnn", 700), 13);
    const auto res = grad_check(model, random_batch<double>(8, 700, 3), random_labels(8, 4), 1e-6, 20, 5);
    EXPECT_LT(res.max_rel_error, 1e-4) << res.worst_param << "[" << res.worst_index << "]";
}

TEST(GradCheck, EveryLayerKind) {
    // Train-mode batchnorm in both flat and sequence form, strided valid conv,
    // both pooling kinds.
    const auto cfg = config(33, {LayerSpec::conv1d(3, 4, 2), LayerSpec::batchnorm(), LayerSpec::relu(), LayerSpec::maxpool(2),
                                 LayerSpec::conv1d(2, 3, 1, Padding::Same), LayerSpec::avgpool(2), LayerSpec::flatten(),
                                 LayerSpec::dense(7), LayerSpec::batchnorm(), LayerSpec::relu(), LayerSpec::head()});
    const auto model = build_model<double>(cfg, 14);
    // The first conv bias feeds batchnorm, so its true gradient is exactly zero
    // and the analytic value is pure round-off; a 1e-8 floor keeps that from
    // reading as a relative error.
    const auto res = grad_check(model, random_batch<double>(6, 33, 4), random_labels(6, 5), 1e-6, 20, 6, {}, 1e-8);
    EXPECT_LT(res.max_rel_error, 1e-4) << res.worst_param << "[" << res.worst_index << "]";

    auto infer = model;
    infer.mode = Mode::Infer;
    const auto ri = grad_check(infer, random_batch<double>(6, 33, 5), random_labels(6, 6), 1e-6, 20, 7);
    EXPECT_LT(ri.max_rel_error, 1e-4) << ri.worst_param << "[" << ri.worst_index << "]";
}

TEST(GradCheck, DetectsCorruptedGradient) {
    const auto model = build_model<double>(config(10, {LayerSpec::dense(6), LayerSpec::relu(), LayerSpec::head()}), 15);
    GradientFn corrupted = [](const Model<double>& m, const Tensor<double>& x, std::span<const std::uint8_t> y) {
        auto copy = m;
        auto g = compute_gradients(copy, x, y).grads;
        for (auto& v : g.begin()->second.data) v *= 1.1;
        return g;
    };
    const auto res = grad_check(model, random_batch<double>(4, 10, 6), random_labels(4, 7), 1e-6, 20, 8, corrupted);
    EXPECT_GT(res.max_rel_error, 1e-2);
}

// ---------------------------------------------------------------------------
// Inference helpers

TEST(Predict, ProbabilitiesSumToOne) {
    TraceSet ts(5, 6);
    Rng rng(3);
    for (auto& v : ts.samples()) v = static_cast<float>(rng.normal());
    const auto model = build_model<float>(config(6, {LayerSpec::dense(4), LayerSpec::relu(), LayerSpec::head()}), 2);
    const auto p = predict_proba(model, ts, 2);
    ASSERT_EQ(p.size(), 5u * 256);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(std::accumulate(p.begin() + static_cast<std::ptrdiff_t>(i * 256), p.begin() + static_cast<std::ptrdiff_t>((i + 1) * 256), 0.0), 1.0, 1e-9);
}

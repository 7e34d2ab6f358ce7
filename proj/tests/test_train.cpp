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

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "scaforge/synth.hpp"
#include "scaforge/train.hpp"
#include "test_util.hpp"

using namespace scaforge;
using scaforge::testing::read_bytes;
using scaforge::testing::TempDir;

namespace {

TraceSet small_synth(std::size_t n, std::uint64_t seed, double sigma = 0.5) {
    SynthConfig cfg;
    cfg.n_traces = n;
    cfg.n_samples = 16;
    cfg.leak_pos_masked = 5;
    cfg.leak_pos_mask = 10;
    cfg.sigma = sigma;
    cfg.unprotected = true;
    cfg.seed = seed;
    return generate(cfg);
}

ModelConfig mlp(std::size_t width, std::size_t hidden = 16) {
    ModelConfig c;
    c.name = "mlp";
    c.input_width = width;
    c.layers = {LayerSpec::dense(hidden), LayerSpec::relu(), LayerSpec::dense(hidden), LayerSpec::relu(), LayerSpec::head()};
    return c;
}

ModelConfig mlp_bn(std::size_t width) {
    ModelConfig c;
    c.name = "mlp_bn";
    c.input_width = width;
    c.layers = {LayerSpec::dense(12), LayerSpec::batchnorm(), LayerSpec::relu(), LayerSpec::head()};
    return c;
}

TrainConfig adam_config(std::size_t epochs, double lr, std::size_t batch = 50) {
    TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.batch_size = batch;
    cfg.optimizer = OptimizerConfig::adam(lr);
    cfg.schedule.kind = ScheduleKind::Constant;
    cfg.schedule.base_lr = lr;
    cfg.seed = 3;
    return cfg;
}

std::vector<std::size_t> all_rows(std::size_t n) {
    std::vector<std::size_t> r(n);
    for (std::size_t i = 0; i < n; ++i) r[i] = i;
    return r;
}

// Largest elementwise difference, relative to the largest reference entry.
double rel_diff(const Gradients<double>& a, const Gradients<double>& ref) {
    double worst = 0;
    for (const auto& [name, t] : ref) {
        double scale = 0, diff = 0;
        for (std::size_t i = 0; i < t.size(); ++i) {
            scale = std::max(scale, std::abs(t[i]));
            diff = std::max(diff, std::abs(a.at(name)[i] - t[i]));
        }
        if (scale > 0) worst = std::max(worst, diff / scale);
    }
    return worst;
}

std::size_t line_count(const std::filesystem::path& p) {
    const auto text = read_bytes(p);
    return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
}

}  // namespace

// ---------------------------------------------------------------------------
// Config and split

TEST(TrainConfig, Validation) {
    auto cfg = adam_config(1, 1e-3);
    cfg.workers = 3;
    EXPECT_THROW(cfg.validate(), InvalidConfig);
    cfg = adam_config(0, 1e-3);
    EXPECT_THROW(cfg.validate(), InvalidConfig);
    cfg = adam_config(1, 1e-3);
    cfg.val_fraction = 0.6;
    EXPECT_THROW(cfg.validate(), InvalidConfig);
    EXPECT_EQ(parse_precision("f64"), Precision::F64);
    EXPECT_THROW(parse_precision("f16"), InvalidConfig);
}

TEST(Split, SizesAndDisjointness) {
    std::vector<std::size_t> train, val;
    split_indices(1005, 0.1, 4, train, val);
    EXPECT_EQ(val.size(), 100u);
    EXPECT_EQ(train.size(), 905u);
    std::set<std::size_t> all(train.begin(), train.end());
    for (auto v : val) EXPECT_TRUE(all.insert(v).second);
    EXPECT_EQ(all.size(), 1005u);
    EXPECT_EQ(*all.rbegin(), 1004u);
}

// ---------------------------------------------------------------------------
// Data-parallel gradients

TEST(ParallelGrad, MatchesFullBatchForEveryWorkerCount) {
    const auto ts = small_synth(64, 1);
    auto model = build_model<double>(mlp(16), 2);
    const auto rows = all_rows(64);
    const auto& labels = *ts.meta.labels;
    auto full = compute_gradients(model, batch_from<double>(ts, rows), labels);
    for (std::size_t W : {1u, 2u, 4u, 8u}) {
        std::vector<Shard<double>> shards(W);
        const std::size_t per = 64 / W;
        for (std::size_t w = 0; w < W; ++w) {
            const std::span<const std::size_t> part(rows.data() + w * per, per);
            shards[w].batch = batch_from<double>(ts, part);
            shards[w].labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(w * per),
                                    labels.begin() + static_cast<std::ptrdiff_t>((w + 1) * per));
        }
        const auto res = parallel_grad(model, std::span<const Shard<double>>(shards));
        EXPECT_LT(rel_diff(res.grads, full.grads), 1e-10) << "W=" << W;
        EXPECT_NEAR(res.loss, full.loss, 1e-12) << "W=" << W;
    }
}

TEST(ParallelGrad, IdenticalShardsGiveSingleShardGradient) {
    const auto ts = small_synth(10, 2);
    auto model = build_model<double>(mlp_bn(16), 3);
    Shard<double> one{batch_from<double>(ts, all_rows(10)), *ts.meta.labels};
    const std::vector<Shard<double>> shards(4, one);
    const auto single = parallel_grad(model, std::span<const Shard<double>>(&one, 1));
    const auto many = parallel_grad(model, std::span<const Shard<double>>(shards));
    EXPECT_LT(rel_diff(many.grads, single.grads), 1e-15);
}

TEST(ParallelGrad, SingleWorkerEqualsPlainBackward) {
    const auto ts = small_synth(20, 3);
    auto model = build_model<double>(mlp(16), 4);
    Shard<double> one{batch_from<double>(ts, all_rows(20)), *ts.meta.labels};
    const auto res = parallel_grad(model, std::span<const Shard<double>>(&one, 1));
    const auto plain = compute_gradients(model, one.batch, one.labels);
    EXPECT_EQ(res.grads, plain.grads);
    EXPECT_EQ(res.loss, plain.loss);
}

TEST(ParallelGrad, ThreadCapDoesNotChangeResults) {
    const auto ts = small_synth(40, 4);
    auto model = build_model<double>(mlp_bn(16), 5);
    std::vector<Shard<double>> shards(4);
    for (std::size_t w = 0; w < 4; ++w) {
        std::vector<std::size_t> part;
        for (std::size_t r = 0; r < 10; ++r) part.push_back(w * 10 + r);
        shards[w].batch = batch_from<double>(ts, part);
        for (auto r : part) shards[w].labels.push_back((*ts.meta.labels)[r]);
    }
    const auto a = parallel_grad(model, std::span<const Shard<double>>(shards), 1);
    const auto b = parallel_grad(model, std::span<const Shard<double>>(shards), 4);
    EXPECT_EQ(a.grads, b.grads);
    EXPECT_EQ(a.bn_state, b.bn_state);
}

// ---------------------------------------------------------------------------
// Training loop

TEST(Fit, ZeroLearningRateLeavesParameters) {
    const auto ts = small_synth(200, 5);
    const auto model = build_model<double>(mlp(16), 6);
    const auto res = fit(model, ts, adam_config(1, 0.0));
    EXPECT_EQ(res.model.params, model.params);
    ASSERT_EQ(res.history.size(), 1u);
    const auto rows = all_rows(200);
    EXPECT_NEAR(res.history[0].train_loss, mean_loss(model, ts, rows), 1e-12);
}

TEST(Fit, TrainingLossDrops) {
    // HW leakage caps what any model can reach well above 1 nat; the check is
    // a clear drop below the uniform-guess loss.
    const auto ts = small_synth(5000, 6);
    const auto model = build_model<float>(mlp(16, 32), 7);
    auto cfg = adam_config(10, 2e-3, 100);
    const auto res = fit(model, ts, cfg);
    ASSERT_EQ(res.history.size(), 10u);
    EXPECT_NEAR(res.history.front().train_loss, std::log(256.0), 0.3);
    EXPECT_LT(res.history.back().train_loss, std::log(256.0) - 0.8);
    EXPECT_LT(res.history.back().train_loss, res.history.front().train_loss);
}

TEST(Fit, ValidationSplitIsHeldOut) {
    const auto ts = small_synth(300, 8);
    auto cfg = adam_config(2, 1e-3);
    cfg.val_fraction = 0.1;
    const auto res = fit(build_model<float>(mlp(16), 9), ts, cfg);
    EXPECT_EQ(res.val_indices.size(), 30u);
    EXPECT_EQ(res.train_indices.size(), 270u);
    std::set<std::size_t> train(res.train_indices.begin(), res.train_indices.end());
    for (auto v : res.val_indices) EXPECT_FALSE(train.count(v));
    for (const auto& r : res.history) {
        ASSERT_TRUE(r.val_loss);
        EXPECT_TRUE(std::isfinite(*r.val_loss));
    }
}

TEST(Fit, EmaAfterOneStepEqualsRawLoss) {
    const auto ts = small_synth(50, 9);
    const auto model = build_model<double>(mlp(16), 10);
    const auto res = fit(model, ts, adam_config(1, 1e-3, 50));
    ASSERT_EQ(res.history.size(), 1u);
    EXPECT_EQ(res.history[0].ema_loss, res.history[0].train_loss);
}

TEST(Fit, ReproducibleHistory) {
    const auto ts = small_synth(400, 10);
    const auto model = build_model<float>(mlp_bn(16), 11);
    auto cfg = adam_config(3, 1e-3, 40);
    cfg.workers = 4;
    cfg.augment_max_shift = 2;
    cfg.val_fraction = 0.1;
    TempDir dir("repro");
    FitOptions<float> o1, o2;
    o1.history_path = dir / "a.jsonl";
    o2.history_path = dir / "b.jsonl";
    const auto a = fit(model, ts, cfg, o1);
    const auto b = fit(model, ts, cfg, o2);
    EXPECT_EQ(a.model.params, b.model.params);
    EXPECT_EQ(read_bytes(dir / "a.jsonl"), read_bytes(dir / "b.jsonl"));
    EXPECT_EQ(line_count(dir / "a.jsonl"), 3u);
    cfg.seed = 4;
    const auto c = fit(model, ts, cfg);
    EXPECT_NE(a.model.params, c.model.params);
}

TEST(Fit, WorkerCountDoesNotMatterWithoutBatchnorm) {
    const auto ts = small_synth(200, 11);
    const auto model = build_model<double>(mlp(16), 12);
    auto cfg = adam_config(2, 1e-3, 40);
    cfg.precision = Precision::F64;
    const auto one = fit(model, ts, cfg);
    cfg.workers = 4;
    const auto four = fit(model, ts, cfg);
    for (const auto& [name, t] : one.model.params)
        for (std::size_t i = 0; i < t.size(); ++i) ASSERT_NEAR(four.model.params.at(name)[i], t[i], 1e-9) << name;
}

TEST(Fit, SwaModelIsAverageOfEpochSnapshots) {
    const auto ts = small_synth(100, 12);
    const auto model = build_model<double>(mlp(16), 13);
    auto cfg = adam_config(4, 1e-3);
    cfg.swa_start_epoch = 3;
    const auto res = fit(model, ts, cfg);
    ASSERT_TRUE(res.swa_model);
    EXPECT_EQ(res.final_state.swa_models, 2u);
    auto cfg3 = cfg;
    cfg3.epochs = 3;
    cfg3.swa_start_epoch.reset();
    // A constant schedule makes the 3-epoch run a prefix of the 4-epoch one.
    const auto at3 = fit(model, ts, cfg3);
    for (const auto& [name, t] : res.swa_model->params)
        for (std::size_t i = 0; i < t.size(); ++i)
            EXPECT_NEAR(t[i], 0.5 * (at3.model.params.at(name)[i] + res.model.params.at(name)[i]), 1e-12) << name;
}

TEST(Fit, GeIsRecordedEveryKEpochs) {
    const auto ts = small_synth(200, 13);
    SynthConfig ac;
    ac.n_traces = 50;
    ac.n_samples = 16;
    ac.leak_pos_masked = 5;
    ac.leak_pos_mask = 10;
    ac.unprotected = true;
    ac.fixed_key = Block16{};
    ac.seed = 99;
    const auto attack = generate(ac);
    auto cfg = adam_config(4, 1e-3);
    cfg.eval_ge_every = 2;
    FitOptions<float> opts;
    opts.ge_attack = &attack;
    opts.ge.repetitions = 5;
    opts.ge.max_traces = 50;
    const auto res = fit(build_model<float>(mlp(16), 1), ts, cfg, opts);
    EXPECT_FALSE(res.history[0].ge_at_checkpoint);
    EXPECT_TRUE(res.history[1].ge_at_checkpoint);
    EXPECT_FALSE(res.history[2].ge_at_checkpoint);
    EXPECT_TRUE(res.history[3].ge_at_checkpoint);
}

TEST(Fit, DivergedKeepsCompletedHistory) {
    auto ts = small_synth(100, 14);
    ts.at(17, 3) = NAN;
    TempDir dir("diverge");
    FitOptions<float> opts;
    opts.history_path = dir / "h.jsonl";
    try {
        fit(build_model<float>(mlp(16), 2), ts, adam_config(3, 1e-3), opts);
        FAIL() << "expected Diverged";
    } catch (const Diverged& e) {
        EXPECT_TRUE(e.history().empty());
    }
    EXPECT_EQ(line_count(dir / "h.jsonl"), 0u);

    // Two clean epochs, then a resumed run that hits the bad trace.
    const auto clean = small_synth(100, 14);
    opts.checkpoint_dir = dir.path();
    opts.checkpoint_every = 1;
    const auto first = fit(build_model<float>(mlp(16), 2), clean, adam_config(2, 1e-3), opts);
    EXPECT_EQ(line_count(dir / "h.jsonl"), 2u);
    const auto ckpt = checkpoint_load<float>(first.checkpoints.back());
    FitOptions<float> resume;
    resume.history_path = dir / "h.jsonl";
    resume.resume = &ckpt;
    EXPECT_THROW(fit(build_model<float>(mlp(16), 2), ts, adam_config(4, 1e-3), resume), Diverged);
    EXPECT_EQ(line_count(dir / "h.jsonl"), 2u);
}

TEST(Fit, Errors) {
    auto ts = small_synth(50, 15);
    const auto model = build_model<float>(mlp(16), 1);
    auto cfg = adam_config(1, 1e-3);
    cfg.augment_max_shift = 16;
    EXPECT_THROW(fit(model, ts, cfg), ShiftTooLarge);
    EXPECT_THROW(fit(build_model<float>(mlp(15), 1), ts, adam_config(1, 1e-3)), ShapeMismatch);
    ts.meta.labels.reset();
    EXPECT_THROW(fit(model, ts, adam_config(1, 1e-3)), MissingMetadata);
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
    const auto ts = small_synth(100, 16);
    auto cfg = adam_config(2, 1e-3);
    cfg.swa_start_epoch = 1;
    const auto res = fit(build_model<double>(mlp_bn(16), 3), ts, cfg);
    TempDir dir("ckpt");
    checkpoint_save(res.final_state, dir / "a");
    const auto loaded = checkpoint_load<double>(dir / "a");
    checkpoint_save(loaded, dir / "b");
    EXPECT_EQ(read_bytes(dir / "a/manifest.json"), read_bytes(dir / "b/manifest.json"));
    EXPECT_EQ(read_bytes(dir / "a/tensors.bin"), read_bytes(dir / "b/tensors.bin"));
    EXPECT_EQ(loaded.model.params, res.final_state.model.params);
    EXPECT_EQ(loaded.model.bn_state, res.final_state.model.bn_state);
    EXPECT_EQ(loaded.opt_state, res.final_state.opt_state);
    EXPECT_EQ(loaded.swa_params, res.final_state.swa_params);
    EXPECT_EQ(loaded.step, res.final_state.step);
    EXPECT_EQ(loaded.epoch, 2u);
    const auto manifest = checkpoint_manifest(dir / "a");
    EXPECT_EQ(manifest["config_hash"], config_hash(mlp_bn(16)));
    EXPECT_EQ(manifest["step"], 4);
    EXPECT_EQ(checkpoint_precision(dir / "a"), Precision::F64);
}

TEST(Checkpoint, IncompatibleModelIsRejected) {
    Checkpoint<float> c;
    c.model = build_model<float>(mlp(16), 1);
    TempDir dir("mismatch");
    checkpoint_save(c, dir / "c");
    const auto wider = mlp(16, 20);
    EXPECT_THROW(checkpoint_load<float>(dir / "c", &wider), ManifestMismatch);
    EXPECT_THROW(checkpoint_load<double>(dir / "c"), ManifestMismatch);
    const auto same = mlp(16);
    EXPECT_NO_THROW(checkpoint_load<float>(dir / "c", &same));
    EXPECT_NE(config_hash(mlp(16)), config_hash(wider));
}

TEST(Checkpoint, CorruptBlobIsRejected) {
    Checkpoint<float> c;
    c.model = build_model<float>(mlp(16), 1);
    TempDir dir("corrupt");
    checkpoint_save(c, dir / "c");
    std::filesystem::resize_file(dir / "c/tensors.bin", 12);
    EXPECT_THROW(checkpoint_load<float>(dir / "c"), Error);
    EXPECT_THROW(checkpoint_load<float>(dir / "missing"), Error);
}

TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
    const auto ts = small_synth(300, 17);
    const auto model = build_model<float>(mlp(16), 4);
    auto cfg = adam_config(3, 2e-3, 50);
    cfg.schedule.kind = ScheduleKind::OneCycleLinear;
    cfg.schedule.lr_max = 2e-3;
    cfg.augment_max_shift = 1;
    TempDir dir("resume");
    FitOptions<float> opts;
    opts.checkpoint_dir = dir.path();
    opts.checkpoint_every = 1;
    opts.history_path = dir / "full.jsonl";
    const auto full = fit(model, ts, cfg, opts);
    ASSERT_EQ(full.checkpoints.size(), 3u);

    const auto ckpt = checkpoint_load<float>(dir / "ckpt_epoch2", &model.config);
    FitOptions<float> resume;
    resume.resume = &ckpt;
    const auto resumed = fit(model, ts, cfg, resume);
    EXPECT_EQ(resumed.model.params, full.model.params);
    ASSERT_EQ(resumed.history.size(), 1u);
    EXPECT_EQ(to_json(resumed.history[0]).dump(), to_json(full.history[2]).dump());
}

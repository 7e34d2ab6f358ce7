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

#include "scaforge/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <numeric>
#include <thread>

#include "scaforge/rng.hpp"

namespace scaforge {

std::string to_string(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }

Precision parse_precision(const std::string& name) {
    if (name == "f32") return Precision::F32;
    if (name == "f64") return Precision::F64;
    throw InvalidConfig("unknown precision '" + name + "'");
}

void TrainConfig::validate() const {
    if (epochs == 0) throw InvalidConfig("train: epochs must be positive");
    if (batch_size == 0 || workers == 0) throw InvalidConfig("train: batch_size and workers must be positive");
    if (batch_size % workers != 0) throw InvalidConfig("train: batch_size must be divisible by workers");
    if (!(val_fraction >= 0.0 && val_fraction <= 0.5)) throw InvalidConfig("train: val_fraction must be in [0, 0.5]");
    if (!(ema_beta >= 0.0 && ema_beta < 1.0)) throw InvalidConfig("train: ema_beta must be in [0, 1)");
    if (eval_ge_every && *eval_ge_every == 0) throw InvalidConfig("train: eval_ge_every must be positive");
    optimizer.validate();
}

nlohmann::ordered_json to_json(const EpochRecord& r, bool with_timing) {
    nlohmann::ordered_json j;
    j["epoch"] = r.epoch;
    j["train_loss"] = r.train_loss;
    j["ema_loss"] = r.ema_loss;
    j["val_loss"] = r.val_loss ? nlohmann::ordered_json(*r.val_loss) : nlohmann::ordered_json(nullptr);
    j["lr_last"] = r.lr_last;
    j["ge_at_checkpoint"] = r.ge_at_checkpoint ? nlohmann::ordered_json(*r.ge_at_checkpoint) : nlohmann::ordered_json(nullptr);
    if (with_timing) j["wall_time_s"] = r.wall_time_s;
    return j;
}

template <class T>
ParallelResult<T> parallel_grad(const Model<T>& model, std::span<const Shard<T>> shards, std::size_t max_threads) {
    if (shards.empty()) throw ShapeMismatch("parallel_grad needs at least one shard");
    const bool training = model.mode == Mode::Train;

    struct Lane {
        double loss = 0.0;
        Gradients<T> grads;
        ParamMap<T> bn_state;
        std::exception_ptr error;
    };
    std::vector<Lane> lanes(shards.size());

    auto run = [&](std::size_t w) {
        try {
            const auto& sh = shards[w];
            if (sh.labels.empty()) return;
            Lane& lane = lanes[w];
            lane.bn_state = model.bn_state;
            Tape<T> tape;
            PassOptions<T> opts;
            opts.training = training;
            opts.running_stats = training ? &lane.bn_state : nullptr;
            opts.tape = &tape;
            const auto logits = forward_pass(model, sh.batch, opts);
            auto loss = loss_ce(logits, sh.labels);
            lane.loss = loss.loss;
            lane.grads = backward(model, tape, loss.dlogits);
        } catch (...) {
            lanes[w].error = std::current_exception();
        }
    };

    const std::size_t n_threads = std::clamp<std::size_t>(max_threads == 0 ? shards.size() : max_threads, 1, shards.size());
    if (n_threads == 1) {
        for (std::size_t w = 0; w < shards.size(); ++w) run(w);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 1; t < n_threads; ++t)
            pool.emplace_back([&, t] {
                for (std::size_t w = t; w < shards.size(); w += n_threads) run(w);
            });
        for (std::size_t w = 0; w < shards.size(); w += n_threads) run(w);
    }
    for (const auto& lane : lanes)
        if (lane.error) std::rethrow_exception(lane.error);

    std::size_t total = 0;
    for (const auto& sh : shards) {
        if (sh.batch.shape.empty() || sh.batch.shape[0] != sh.labels.size()) throw ShapeMismatch("shard batch/label size mismatch");
        total += sh.labels.size();
    }
    if (total == 0) throw ShapeMismatch("all shards are empty");

    // Fixed-order reduction.
    ParallelResult<T> out;
    for (const auto& [name, p] : model.params) out.grads.emplace(name, Tensor<T>(p.shape));
    for (const auto& [name, s] : model.bn_state) out.bn_state.emplace(name, Tensor<T>(s.shape));
    for (std::size_t w = 0; w < shards.size(); ++w) {
        const std::size_t count = shards[w].labels.size();
        if (count == 0) continue;
        const double weight = static_cast<double>(count) / static_cast<double>(total);
        out.loss += weight * lanes[w].loss;
        for (auto& [name, g] : out.grads) {
            const auto& src = lanes[w].grads.at(name);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<T>(g[i] + weight * src[i]);
        }
        for (auto& [name, s] : out.bn_state) {
            const auto& src = lanes[w].bn_state.at(name);
            for (std::size_t i = 0; i < s.size(); ++i) s[i] = static_cast<T>(s[i] + weight * src[i]);
        }
    }
    return out;
}

void split_indices(std::size_t n, double val_fraction, std::uint64_t seed, std::vector<std::size_t>& train,
                   std::vector<std::size_t>& val) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed, "split");
    rng.shuffle(order.begin(), order.end());
    const auto n_val = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(n)));
    train.assign(order.begin(), order.end() - static_cast<std::ptrdiff_t>(n_val));
    val.assign(order.end() - static_cast<std::ptrdiff_t>(n_val), order.end());
}

template <class T>
double mean_loss(const Model<T>& model, const TraceSet& ts, std::span<const std::size_t> rows, std::size_t batch) {
    if (rows.empty()) return 0.0;
    if (!ts.meta.labels) throw MissingMetadata("loss needs labels");
    PassOptions<T> opts;
    opts.training = false;
    double total = 0.0;
    std::vector<std::uint8_t> labels;
    for (std::size_t first = 0; first < rows.size(); first += batch) {
        const std::size_t count = std::min(batch, rows.size() - first);
        const auto chunk = rows.subspan(first, count);
        labels.resize(count);
        for (std::size_t r = 0; r < count; ++r) labels[r] = (*ts.meta.labels)[chunk[r]];
        total += loss_ce(forward_pass(model, batch_from<T>(ts, chunk), opts), labels).loss * static_cast<double>(count);
    }
    return total / static_cast<double>(rows.size());
}

template <class T>
void refresh_batchnorm_stats(Model<T>& model, const TraceSet& ts, std::span<const std::size_t> rows, std::size_t batch) {
    if (model.bn_state.empty() || rows.empty()) return;
    for (auto& [name, s] : model.bn_state) std::fill(s.data.begin(), s.data.end(), T{0});
    PassOptions<T> opts;
    opts.training = true;
    opts.running_stats = &model.bn_state;
    std::size_t k = 0;
    for (std::size_t first = 0; first < rows.size(); first += batch) {
        const std::size_t count = std::min(batch, rows.size() - first);
        opts.cumulative_count = ++k;
        forward_pass(model, batch_from<T>(ts, rows.subspan(first, count)), opts);
    }
}

template <class T>
FitResult<T> fit(const Model<T>& initial, const TraceSet& ts, TrainConfig cfg, const FitOptions<T>& opts) {
    cfg.validate();
    if (!ts.meta.labels) throw MissingMetadata("training needs labelled traces");
    if (ts.n_samples() != initial.config.input_width) throw ShapeMismatch("trace width does not match model input width");
    if (cfg.augment_max_shift && *cfg.augment_max_shift >= ts.n_samples() && *cfg.augment_max_shift > 0)
        throw ShiftTooLarge("augmentation shift must be smaller than the trace length");

    FitResult<T> result;
    split_indices(ts.n_traces(), cfg.val_fraction, cfg.seed, result.train_indices, result.val_indices);
    const auto& train_rows = result.train_indices;
    if (train_rows.empty()) throw EmptyTraceSet("no training traces after the validation split");

    const std::size_t steps_per_epoch = (train_rows.size() + cfg.batch_size - 1) / cfg.batch_size;
    cfg.schedule.total_steps = cfg.epochs * steps_per_epoch;
    cfg.schedule.validate();

    Checkpoint<T> state;
    if (opts.resume) {
        state = *opts.resume;
        if (config_hash(state.model.config) != config_hash(initial.config))
            throw ManifestMismatch("resume checkpoint belongs to a different model config");
    } else {
        state.model = initial;
    }
    state.optimizer = cfg.optimizer;
    state.model.mode = Mode::Train;
    SwaState<T> swa{state.swa_params, state.swa_models};

    std::ofstream history_file;
    if (opts.history_path) {
        history_file.open(*opts.history_path, opts.resume ? std::ios::app : std::ios::trunc);
        if (!history_file) throw IoError("cannot open history file " + opts.history_path->string());
    }

    const auto& labels = *ts.meta.labels;
    const std::size_t W = cfg.workers;
    std::vector<std::size_t> perm;
    for (std::size_t epoch = state.epoch + 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        perm = train_rows;
        Rng shuffle_rng(cfg.seed, "shuffle", epoch);
        shuffle_rng.shuffle(perm.begin(), perm.end());
        Rng augment_rng(cfg.seed, "augment", epoch);

        double loss_sum = 0.0;
        double lr = 0.0;
        for (std::size_t b = 0; b < steps_per_epoch; ++b) {
            const std::size_t first = b * cfg.batch_size;
            const std::size_t count = std::min(cfg.batch_size, perm.size() - first);
            const std::span<const std::size_t> rows(perm.data() + first, count);
            Tensor<T> full = batch_from<T>(ts, rows);
            if (cfg.augment_max_shift && *cfg.augment_max_shift > 0) {
                const std::size_t s = ts.n_samples();
                for (std::size_t r = 0; r < count; ++r) {
                    const auto shifted = random_shift(ts.trace(rows[r]), *cfg.augment_max_shift, augment_rng);
                    std::copy(shifted.begin(), shifted.end(), full.data.begin() + static_cast<std::ptrdiff_t>(r * s));
                }
            }
            // Contiguous shards; a short last batch is split as evenly as possible.
            std::vector<Shard<T>> shards(W);
            const std::size_t s = ts.n_samples();
            std::size_t offset = 0;
            for (std::size_t w = 0; w < W; ++w) {
                const std::size_t size = count / W + (w < count % W ? 1 : 0);
                shards[w].batch = Tensor<T>({size, s});
                std::copy_n(full.data.begin() + static_cast<std::ptrdiff_t>(offset * s), size * s, shards[w].batch.data.begin());
                for (std::size_t r = 0; r < size; ++r) shards[w].labels.push_back(labels[rows[offset + r]]);
                offset += size;
            }

            lr = schedule_value(cfg.schedule, state.step);
            auto step = parallel_grad(state.model, std::span<const Shard<T>>(shards), cfg.max_threads);
            if (!std::isfinite(step.loss)) {
                throw Diverged("training loss became non-finite at epoch " + std::to_string(epoch) + ", step " +
                                   std::to_string(state.step),
                               result.history);
            }
            try {
                opt_step(cfg.optimizer, state.opt_state, state.model.params, step.grads, lr);
            } catch (const NonFiniteGradient& e) {
                throw Diverged(std::string("training diverged: ") + e.what(), result.history);
            }
            state.model.bn_state = std::move(step.bn_state);
            state.ema_avg = cfg.ema_beta * state.ema_avg + (1.0 - cfg.ema_beta) * step.loss;
            ++state.ema_count;
            loss_sum += step.loss;
            ++state.step;
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(steps_per_epoch);
        rec.ema_loss = state.ema_avg / (1.0 - std::pow(cfg.ema_beta, static_cast<double>(state.ema_count)));
        rec.lr_last = lr;
        if (!result.val_indices.empty()) rec.val_loss = mean_loss(state.model, ts, result.val_indices);
        if (cfg.eval_ge_every && opts.ge_attack && epoch % *cfg.eval_ge_every == 0) {
            Model<T> probe = state.model;
            probe.mode = Mode::Infer;
            const auto curve = guessing_entropy(probe, *opts.ge_attack, opts.ge);
            rec.ge_at_checkpoint = curve.mean_rank.back();
        }
        if (cfg.swa_start_epoch && epoch >= *cfg.swa_start_epoch) swa_update(swa, state.model.params);
        state.epoch = epoch;
        state.swa_models = swa.n_models;
        state.swa_params = swa.averaged;
        rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.history.push_back(rec);
        if (history_file.is_open()) {
            history_file << to_json(rec).dump() << '\n';
            history_file.flush();
        }
        if (opts.checkpoint_dir && opts.checkpoint_every > 0 && epoch % opts.checkpoint_every == 0) {
            const auto dir = *opts.checkpoint_dir / ("ckpt_epoch" + std::to_string(epoch));
            checkpoint_save(state, dir);
            result.checkpoints.push_back(dir);
        }
    }

    result.model = state.model;
    if (swa.n_models > 0) {
        Model<T> averaged = state.model;
        averaged.params = swa.averaged;
        refresh_batchnorm_stats(averaged, ts, train_rows, cfg.batch_size);
        result.swa_model = std::move(averaged);
    }
    result.final_state = std::move(state);
    return result;
}

#define SCAFORGE_INSTANTIATE(T)                                                                                      \
    template ParallelResult<T> parallel_grad<T>(const Model<T>&, std::span<const Shard<T>>, std::size_t);            \
    template double mean_loss<T>(const Model<T>&, const TraceSet&, std::span<const std::size_t>, std::size_t);       \
    template void refresh_batchnorm_stats<T>(Model<T>&, const TraceSet&, std::span<const std::size_t>, std::size_t); \
    template FitResult<T> fit<T>(const Model<T>&, const TraceSet&, TrainConfig, const FitOptions<T>&);

SCAFORGE_INSTANTIATE(float)
SCAFORGE_INSTANTIATE(double)

#undef SCAFORGE_INSTANTIATE

}  // namespace scaforge

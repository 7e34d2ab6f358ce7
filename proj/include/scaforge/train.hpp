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

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "scaforge/attack.hpp"
#include "scaforge/errors.hpp"
#include "scaforge/nn.hpp"
#include "scaforge/optim.hpp"
#include "scaforge/traceset.hpp"

namespace scaforge {

enum class Precision { F32, F64 };

std::string to_string(Precision p);
Precision parse_precision(const std::string& name);

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 100;
    std::size_t workers = 1;
    OptimizerConfig optimizer;
    ScheduleConfig schedule;  // total_steps is filled in by fit
    std::optional<std::size_t> augment_max_shift;
    std::optional<std::size_t> swa_start_epoch;
    std::uint64_t seed = 0;
    double val_fraction = 0.0;
    std::optional<std::size_t> eval_ge_every;
    Precision precision = Precision::F32;
    double ema_beta = 0.98;
    /// OS threads used to run the workers; 0 means one per worker. Results
    /// depend on `workers` only, never on this.
    std::size_t max_threads = 0;

    void validate() const;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double ema_loss = 0.0;
    std::optional<double> val_loss;
    double lr_last = 0.0;
    std::optional<double> ge_at_checkpoint;
    double wall_time_s = 0.0;
};

/// One JSON object per record. Wall time is left out unless asked for, so
/// history files stay byte-identical across runs.
nlohmann::ordered_json to_json(const EpochRecord& r, bool with_timing = false);

/// Raised when a training loss or gradient becomes non-finite. Carries the
/// records of the epochs completed before the failure.
class Diverged : public Error {
public:
    Diverged(const std::string& what, std::vector<EpochRecord> history)
        : Error(what), history_(std::move(history)) {}
    const std::vector<EpochRecord>& history() const { return history_; }

private:
    std::vector<EpochRecord> history_;
};

template <class T>
struct Shard {
    Tensor<T> batch;
    std::vector<std::uint8_t> labels;
};

template <class T>
struct ParallelResult {
    double loss = 0.0;
    Gradients<T> grads;
    /// Running statistics after the step, averaged over workers.
    ParamMap<T> bn_state;
};

/// Backward pass of each shard on its own lane against a read-only view of
/// `model`, then a reduction in worker-index order weighted by shard size.
/// For equal shards this is the arithmetic mean of the per-worker results.
template <class T>
ParallelResult<T> parallel_grad(const Model<T>& model, std::span<const Shard<T>> shards, std::size_t max_threads = 0);

/// Everything needed to continue a run exactly where it stopped.
template <class T>
struct Checkpoint {
    Model<T> model;
    OptimizerConfig optimizer;
    OptimizerState<T> opt_state;
    std::size_t epoch = 0;
    std::size_t step = 0;
    double ema_avg = 0.0;
    std::size_t ema_count = 0;
    std::size_t swa_models = 0;
    ParamMap<T> swa_params;
    nlohmann::json extra = nlohmann::json::object();
};

/// Writes `dir/manifest.json` and `dir/tensors.bin` (little-endian, tensors
/// concatenated in lexicographic name order).
template <class T>
void checkpoint_save(const Checkpoint<T>& ckpt, const std::filesystem::path& dir);

/// Throws ManifestMismatch if the stored model config hash differs from
/// `expected` (when given) or the stored precision differs from T.
template <class T>
Checkpoint<T> checkpoint_load(const std::filesystem::path& dir, const ModelConfig* expected = nullptr);

Precision checkpoint_precision(const std::filesystem::path& dir);
nlohmann::json checkpoint_manifest(const std::filesystem::path& dir);

/// Hash of the input width and layer list (the name is not part of it).
std::string config_hash(const ModelConfig& cfg);

template <class T>
struct FitOptions {
    /// Attack set for periodic guessing-entropy evaluation.
    const TraceSet* ge_attack = nullptr;
    GeConfig ge;
    /// JSON-lines history, one line appended per completed epoch.
    std::optional<std::filesystem::path> history_path;
    std::optional<std::filesystem::path> checkpoint_dir;
    std::size_t checkpoint_every = 0;
    const Checkpoint<T>* resume = nullptr;
};

template <class T>
struct FitResult {
    Model<T> model;
    std::optional<Model<T>> swa_model;
    std::vector<EpochRecord> history;
    std::vector<std::filesystem::path> checkpoints;
    Checkpoint<T> final_state;
    std::vector<std::size_t> train_indices;
    std::vector<std::size_t> val_indices;
};

/// Train/validation split: a seeded shuffle with the last
/// floor(val_fraction * N) indices held out.
void split_indices(std::size_t n, double val_fraction, std::uint64_t seed, std::vector<std::size_t>& train,
                   std::vector<std::size_t>& val);

template <class T>
FitResult<T> fit(const Model<T>& model, const TraceSet& profiling, TrainConfig cfg, const FitOptions<T>& opts = {});

/// Mean cross-entropy over `rows` in inference mode.
template <class T>
double mean_loss(const Model<T>& model, const TraceSet& ts, std::span<const std::size_t> rows, std::size_t batch = 256);

/// Recomputes batchnorm running statistics as exact averages over `rows`;
/// needed after weight averaging.
template <class T>
void refresh_batchnorm_stats(Model<T>& model, const TraceSet& ts, std::span<const std::size_t> rows, std::size_t batch);

}  // namespace scaforge

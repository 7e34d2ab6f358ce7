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
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "scaforge/tensor.hpp"
#include "scaforge/traceset.hpp"

namespace scaforge {

inline constexpr std::size_t kNumClasses = 256;

enum class LayerKind { Dense, Conv1d, BatchNorm, Relu, AvgPool, MaxPool, Flatten, SoftmaxCeHead };
enum class Padding { Same, Valid };

std::string to_string(LayerKind kind);

struct LayerSpec {
    LayerKind kind = LayerKind::Relu;
    std::size_t units = 0;    // dense units, head classes
    std::size_t filters = 0;  // conv1d
    std::size_t kernel = 0;
    std::size_t stride = 1;
    Padding padding = Padding::Valid;
    double momentum = 0.99;   // batchnorm
    double eps = 1e-5;
    std::size_t width = 0;    // pooling

    static LayerSpec dense(std::size_t units);
    static LayerSpec conv1d(std::size_t filters, std::size_t kernel, std::size_t stride = 1, Padding padding = Padding::Valid);
    static LayerSpec batchnorm(double momentum = 0.99, double eps = 1e-5);
    static LayerSpec relu();
    static LayerSpec avgpool(std::size_t width);
    static LayerSpec maxpool(std::size_t width);
    static LayerSpec flatten();
    static LayerSpec head(std::size_t classes = kNumClasses);

    bool operator==(const LayerSpec&) const = default;
};

/// Ordered layer list plus the input width it is built for.
struct ModelConfig {
    std::string name;
    std::size_t input_width = 0;
    std::vector<LayerSpec> layers;

    bool operator==(const ModelConfig&) const = default;
};

nlohmann::ordered_json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Activation shape of one sample. Sequence activations are channels x
/// length; after dense/flatten the activation is a flat feature vector.
struct ActShape {
    std::size_t channels = 1;
    std::size_t length = 0;
    bool flat = false;

    std::size_t numel() const { return channels * length; }
    bool operator==(const ActShape&) const = default;
};

/// Output shape after each layer (index 0 is the input). Throws
/// ShapeMismatch naming the first offending layer.
std::vector<ActShape> infer_shapes(const ModelConfig& cfg);

std::size_t parameter_count(const ModelConfig& cfg);

/// Output length of a valid convolution: floor((S - kernel) / stride) + 1.
std::size_t conv_valid_length(std::size_t length, std::size_t kernel, std::size_t stride);

/// Directory searched by `load_preset`: $SCAFORGE_PRESET_DIR if set, else
/// the presets/ directory of the source tree.
std::filesystem::path preset_dir();
ModelConfig load_preset(const std::string& name, std::size_t input_width);
ModelConfig load_model_config(const std::filesystem::path& path, std::size_t input_width);

enum class Mode { Train, Infer };

template <class T>
struct Model {
    ModelConfig config;
    ParamMap<T> params;
    ParamMap<T> bn_state;  // running mean / variance per batchnorm layer
    Mode mode = Mode::Train;
};

/// He-uniform for hidden dense/conv weights, Glorot-uniform for the head,
/// zero biases, unit batchnorm scale. Deterministic per seed.
template <class T>
Model<T> build_model(const ModelConfig& cfg, std::uint64_t seed);

template <class To, class From>
Model<To> model_cast(const Model<From>& m) {
    return Model<To>{m.config, params_cast<To>(m.params), params_cast<To>(m.bn_state), m.mode};
}

std::string param_name(std::size_t layer, LayerKind kind, const std::string& what);

/// Per-layer values kept by the forward pass for backward.
template <class T>
struct LayerCache {
    Tensor<T> input;
    Tensor<T> xhat;
    std::vector<T> inv_std;
    std::vector<std::uint32_t> argmax;
};

template <class T>
struct Tape {
    bool training = false;
    std::vector<LayerCache<T>> layers;
};

template <class T>
struct PassOptions {
    bool training = false;
    /// Receives running-statistic updates in training passes; null leaves
    /// them untouched.
    ParamMap<T>* running_stats = nullptr;
    /// Nonzero: cumulative averaging with this 1-based batch count instead
    /// of the momentum update.
    std::size_t cumulative_count = 0;
    Tape<T>* tape = nullptr;
};

/// Core forward pass on a B x S batch; returns B x 256 logits.
template <class T>
Tensor<T> forward_pass(const Model<T>& model, const Tensor<T>& batch, const PassOptions<T>& opts);

/// Forward in the model's own mode. In train mode batchnorm uses batch
/// statistics and updates the running statistics.
template <class T>
Tensor<T> forward(Model<T>& model, const Tensor<T>& batch, Tape<T>* tape = nullptr);

template <class T>
struct LossResult {
    double loss = 0.0;
    Tensor<T> dlogits;
};

/// Mean cross-entropy of softmax(logits) at the labels, with its gradient.
template <class T>
LossResult<T> loss_ce(const Tensor<T>& logits, std::span<const std::uint8_t> labels);

/// Reverse pass through a recorded tape. `dinput`, when given, receives the
/// gradient with respect to the batch.
template <class T>
Gradients<T> backward(const Model<T>& model, const Tape<T>& tape, const Tensor<T>& dlogits, Tensor<T>* dinput = nullptr);

template <class T>
struct GradResult {
    double loss = 0.0;
    Gradients<T> grads;
};

/// Forward, loss and backward in the model's mode; running statistics are
/// updated in train mode.
template <class T>
GradResult<T> compute_gradients(Model<T>& model, const Tensor<T>& batch, std::span<const std::uint8_t> labels);

/// Loss without touching running statistics.
template <class T>
double evaluate_loss(const Model<T>& model, const Tensor<T>& batch, std::span<const std::uint8_t> labels);

using GradientFn = std::function<Gradients<double>(const Model<double>&, const Tensor<double>&,
                                                   std::span<const std::uint8_t>)>;

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
};

/// Compares analytic gradients (backward, or `analytic` when given) to a
/// five-point central difference at `coords_per_param` random coordinates
/// of every parameter tensor. Relative error is |a - n| / max(|a|, |n|, floor).
GradCheckResult grad_check(const Model<double>& model, const Tensor<double>& batch, std::span<const std::uint8_t> labels,
                           double eps, std::size_t coords_per_param, std::uint64_t seed, const GradientFn& analytic = {},
                           double floor = 1e-10);

/// The given rows of a trace set as a rows.size() x S tensor.
template <class T>
Tensor<T> batch_from(const TraceSet& ts, std::span<const std::size_t> rows);

/// Softmax probabilities (N x 256, row-major, double) in inference mode.
template <class T>
std::vector<double> predict_proba(const Model<T>& model, const TraceSet& ts, std::size_t batch = 256);

}  // namespace scaforge

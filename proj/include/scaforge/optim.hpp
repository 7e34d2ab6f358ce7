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
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "scaforge/nn.hpp"
#include "scaforge/tensor.hpp"
#include "scaforge/traceset.hpp"

namespace scaforge {

// ---------------------------------------------------------------------------
// Optimizers

enum class OptimizerKind { RmsProp, Adam };

std::string to_string(OptimizerKind kind);

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::Adam;
    double base_lr = 1e-3;
    double decay = 0.9;     // RMSProp
    double beta1 = 0.9;     // Adam
    double beta2 = 0.999;
    double eps = 1e-8;

    static OptimizerConfig rmsprop(double lr, double decay = 0.9, double eps = 1e-7);
    static OptimizerConfig adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    void validate() const;
};

/// Moment estimates, keyed like the parameters they belong to. RMSProp uses
/// only `second`.
template <class T>
struct OptimizerState {
    std::uint64_t step = 0;
    ParamMap<T> first;
    ParamMap<T> second;

    bool operator==(const OptimizerState&) const = default;
};

/// One in-place update.
///   RMSProp: v = decay v + (1 - decay) g^2;  p -= lr g / (sqrt(v) + eps)
///   Adam:    bias-corrected m and v;          p -= lr m_hat / (sqrt(v_hat) + eps)
/// Throws NonFiniteGradient before touching anything if a gradient entry is
/// NaN or infinite.
template <class T>
void opt_step(const OptimizerConfig& cfg, OptimizerState<T>& state, ParamMap<T>& params, const Gradients<T>& grads, double lr);

// ---------------------------------------------------------------------------
// Learning-rate schedules

enum class ScheduleKind { Constant, OneCycleLinear, ExpCosine };

std::string to_string(ScheduleKind kind);
ScheduleKind parse_schedule_kind(const std::string& name);

struct ScheduleConfig {
    ScheduleKind kind = ScheduleKind::Constant;
    double base_lr = 1e-3;         // constant
    double lr_max = 1e-3;          // one-cycle and exp-cosine peak
    double div = 10.0;             // one-cycle start = lr_max / div
    double final_div = 100.0;      // one-cycle end = lr_max / (div * final_div)
    double pct_peak = 0.4;
    double period_frac = 0.2;      // exp-cosine period as a fraction of training
    double half_life_frac = 0.5;   // exp-cosine envelope half-life, same units
    std::size_t total_steps = 0;

    void validate() const;
};

/// Learning rate at step t in [0, total_steps]; OutOfRange beyond.
double schedule_value(const ScheduleConfig& s, std::size_t t);

/// Linear batch-size scaling: base_lr * batch_size / ref_batch.
double scale_lr(double base_lr, std::size_t batch_size, std::size_t ref_batch = 50);

// ---------------------------------------------------------------------------
// Stochastic weight averaging

template <class T>
struct SwaState {
    ParamMap<T> averaged;
    std::size_t n_models = 0;
};

/// averaged += (params - averaged) / (n + 1)
template <class T>
void swa_update(SwaState<T>& state, const ParamMap<T>& params);

// ---------------------------------------------------------------------------
// Learning-rate finder

struct LrFindConfig {
    double lr_min = 1e-7;
    double lr_max = 10.0;
    std::size_t n_steps = 100;
    double ema_beta = 0.98;
    double divergence_factor = 4.0;

    void validate() const;
};

struct LrCurve {
    std::vector<double> lrs;
    std::vector<double> raw_losses;
    std::vector<double> smoothed;
    double suggestion = 0.0;
    std::optional<std::size_t> truncated_at;
};

/// Runs one step per learning rate and returns the loss seen at that step.
using LrStepFn = std::function<double(std::size_t step, double lr)>;

/// Exponential sweep lr_i = lr_min (lr_max / lr_min)^(i / (n - 1)).
/// Stops at the first non-finite loss, or when the bias-corrected EMA of the
/// loss exceeds divergence_factor times its best value; that step is not part
/// of the curve and its index is `truncated_at`. The suggestion is the rate
/// with the steepest descent of the smoothed loss against log(lr).
LrCurve lr_find(const LrStepFn& step, const LrFindConfig& cfg);

/// Sweep on a throwaway copy of `model`, one mini-batch per step.
template <class T>
LrCurve lr_find(const Model<T>& model, const TraceSet& data, const OptimizerConfig& opt, std::size_t batch_size,
                const LrFindConfig& cfg, std::uint64_t seed);

}  // namespace scaforge

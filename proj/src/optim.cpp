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

#include "scaforge/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "scaforge/errors.hpp"
#include "scaforge/rng.hpp"

namespace scaforge {

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::RmsProp ? "rmsprop" : "adam"; }

OptimizerConfig OptimizerConfig::rmsprop(double lr, double decay, double eps) {
    OptimizerConfig c;
    c.kind = OptimizerKind::RmsProp;
    c.base_lr = lr;
    c.decay = decay;
    c.eps = eps;
    return c;
}

OptimizerConfig OptimizerConfig::adam(double lr, double beta1, double beta2, double eps) {
    OptimizerConfig c;
    c.kind = OptimizerKind::Adam;
    c.base_lr = lr;
    c.beta1 = beta1;
    c.beta2 = beta2;
    c.eps = eps;
    return c;
}

void OptimizerConfig::validate() const {
    const auto open_unit = [](double v) { return v > 0.0 && v < 1.0; };
    if (!(base_lr >= 0.0) || !std::isfinite(base_lr)) throw InvalidConfig("optimizer: base_lr must be finite and >= 0");
    if (!(eps > 0.0)) throw InvalidConfig("optimizer: eps must be > 0");
    if (kind == OptimizerKind::RmsProp && !open_unit(decay)) throw InvalidConfig("optimizer: decay must be in (0, 1)");
    if (kind == OptimizerKind::Adam && (!open_unit(beta1) || !open_unit(beta2)))
        throw InvalidConfig("optimizer: beta1 and beta2 must be in (0, 1)");
}

template <class T>
void opt_step(const OptimizerConfig& cfg, OptimizerState<T>& state, ParamMap<T>& params, const Gradients<T>& grads, double lr) {
    if (grads.size() != params.size()) throw ShapeMismatch("gradient set does not match parameter set");
    for (const auto& [name, p] : params) {
        const auto it = grads.find(name);
        if (it == grads.end() || it->second.shape != p.shape) throw ShapeMismatch("gradient shape mismatch for " + name);
        for (T g : it->second.data)
            if (!std::isfinite(static_cast<double>(g))) throw NonFiniteGradient("non-finite gradient in " + name);
    }

    ++state.step;
    const double t = static_cast<double>(state.step);
    for (auto& [name, p] : params) {
        const auto& g = grads.at(name);
        auto& v = state.second.try_emplace(name, Tensor<T>(p.shape)).first->second;
        if (cfg.kind == OptimizerKind::RmsProp) {
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double gi = g[i];
                const double vi = cfg.decay * v[i] + (1.0 - cfg.decay) * gi * gi;
                v[i] = static_cast<T>(vi);
                p[i] = static_cast<T>(p[i] - lr * gi / (std::sqrt(vi) + cfg.eps));
            }
        } else {
            auto& m = state.first.try_emplace(name, Tensor<T>(p.shape)).first->second;
            const double c1 = 1.0 - std::pow(cfg.beta1, t);
            const double c2 = 1.0 - std::pow(cfg.beta2, t);
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double gi = g[i];
                const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                m[i] = static_cast<T>(mi);
                v[i] = static_cast<T>(vi);
                p[i] = static_cast<T>(p[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps));
            }
        }
    }
}

std::string to_string(ScheduleKind kind) {
    switch (kind) {
        case ScheduleKind::Constant: return "constant";
        case ScheduleKind::OneCycleLinear: return "one_cycle_linear";
        case ScheduleKind::ExpCosine: return "exp_cosine";
    }
    return "?";
}

ScheduleKind parse_schedule_kind(const std::string& name) {
    for (auto k : {ScheduleKind::Constant, ScheduleKind::OneCycleLinear, ScheduleKind::ExpCosine})
        if (to_string(k) == name) return k;
    throw InvalidConfig("unknown schedule '" + name + "'");
}

void ScheduleConfig::validate() const {
    switch (kind) {
        case ScheduleKind::Constant:
            if (!(base_lr >= 0.0)) throw InvalidConfig("schedule: base_lr must be >= 0");
            break;
        case ScheduleKind::OneCycleLinear:
            if (!(lr_max > 0.0) || !(div > 0.0) || !(final_div > 0.0)) throw InvalidConfig("schedule: lr_max, div and final_div must be > 0");
            if (!(pct_peak > 0.0 && pct_peak < 1.0)) throw InvalidConfig("schedule: pct_peak must be in (0, 1)");
            break;
        case ScheduleKind::ExpCosine:
            if (!(lr_max > 0.0)) throw InvalidConfig("schedule: lr_max must be > 0");
            if (!(period_frac > 0.0 && period_frac <= 1.0) || !(half_life_frac > 0.0 && half_life_frac <= 1.0))
                throw InvalidConfig("schedule: period_frac and half_life_frac must be in (0, 1]");
            break;
    }
    if (kind != ScheduleKind::Constant && total_steps == 0) throw InvalidConfig("schedule: total_steps must be > 0");
}

double schedule_value(const ScheduleConfig& s, std::size_t t) {
    if (t > s.total_steps && s.kind != ScheduleKind::Constant)
        throw OutOfRange("schedule step " + std::to_string(t) + " beyond total " + std::to_string(s.total_steps));
    const double T = static_cast<double>(s.total_steps);
    const double x = static_cast<double>(t);
    switch (s.kind) {
        case ScheduleKind::Constant: return s.base_lr;
        case ScheduleKind::OneCycleLinear: {
            const double start = s.lr_max / s.div;
            const double end = s.lr_max / (s.div * s.final_div);
            const double peak = s.pct_peak * T;
            if (x <= peak) return start + (s.lr_max - start) * (x / peak);
            return s.lr_max + (end - s.lr_max) * ((x - peak) / (T - peak));
        }
        case ScheduleKind::ExpCosine: {
            const double half_life = s.half_life_frac * T;
            const double period = s.period_frac * T;
            const double envelope = std::exp2(-x / half_life);
            return s.lr_max * envelope * 0.5 * (1.0 + std::cos(2.0 * std::numbers::pi * x / period));
        }
    }
    return 0.0;
}

double scale_lr(double base_lr, std::size_t batch_size, std::size_t ref_batch) {
    if (batch_size == 0 || ref_batch == 0) throw InvalidConfig("scale_lr: batch sizes must be positive");
    return base_lr * static_cast<double>(batch_size) / static_cast<double>(ref_batch);
}

template <class T>
void swa_update(SwaState<T>& state, const ParamMap<T>& params) {
    if (state.n_models == 0) {
        state.averaged = params;
        state.n_models = 1;
        return;
    }
    if (state.averaged.size() != params.size()) throw ShapeMismatch("SWA snapshot has a different parameter set");
    for (const auto& [name, p] : params) {
        const auto it = state.averaged.find(name);
        if (it == state.averaged.end() || it->second.shape != p.shape) throw ShapeMismatch("SWA shape mismatch for " + name);
    }
    const double k = static_cast<double>(state.n_models + 1);
    for (auto& [name, avg] : state.averaged) {
        const auto& p = params.at(name);
        for (std::size_t i = 0; i < avg.size(); ++i) avg[i] = static_cast<T>(avg[i] + (p[i] - avg[i]) / k);
    }
    ++state.n_models;
}

void LrFindConfig::validate() const {
    if (!(lr_min > 0.0) || !(lr_min < lr_max)) throw InvalidConfig("lr_find: need 0 < lr_min < lr_max");
    if (n_steps < 10) throw InvalidConfig("lr_find: n_steps must be >= 10");
    if (!(ema_beta >= 0.0 && ema_beta < 1.0)) throw InvalidConfig("lr_find: ema_beta must be in [0, 1)");
    if (!(divergence_factor > 1.0)) throw InvalidConfig("lr_find: divergence_factor must be > 1");
}

namespace {

constexpr std::size_t kImmediateDivergenceSteps = 5;

double steepest_descent_lr(const LrCurve& c) {
    const std::size_t n = c.smoothed.size();
    if (n == 0) return 0.0;
    if (n == 1) return c.lrs[0];
    std::size_t best = 0;
    double best_slope = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t lo = i == 0 ? 0 : i - 1;
        const std::size_t hi = i + 1 == n ? i : i + 1;
        const double slope = (c.smoothed[hi] - c.smoothed[lo]) / (std::log(c.lrs[hi]) - std::log(c.lrs[lo]));
        if (slope < best_slope) {
            best_slope = slope;
            best = i;
        }
    }
    return c.lrs[best];
}

}  // namespace

LrCurve lr_find(const LrStepFn& step, const LrFindConfig& cfg) {
    cfg.validate();
    LrCurve curve;
    double avg = 0.0;
    double best = std::numeric_limits<double>::infinity();
    const double ratio = cfg.lr_max / cfg.lr_min;
    for (std::size_t i = 0; i < cfg.n_steps; ++i) {
        double lr = cfg.lr_min * std::pow(ratio, static_cast<double>(i) / static_cast<double>(cfg.n_steps - 1));
        if (i == 0) lr = cfg.lr_min;
        if (i + 1 == cfg.n_steps) lr = cfg.lr_max;

        const double loss = step(i, lr);
        if (!std::isfinite(loss)) {
            if (i < kImmediateDivergenceSteps) throw DivergedImmediately("loss is non-finite at sweep step " + std::to_string(i));
            curve.truncated_at = i;
            break;
        }
        avg = cfg.ema_beta * avg + (1.0 - cfg.ema_beta) * loss;
        const double smoothed = avg / (1.0 - std::pow(cfg.ema_beta, static_cast<double>(i + 1)));
        if (i > 0 && smoothed > cfg.divergence_factor * best) {
            curve.truncated_at = i;
            break;
        }
        best = std::min(best, smoothed);
        curve.lrs.push_back(lr);
        curve.raw_losses.push_back(loss);
        curve.smoothed.push_back(smoothed);
    }
    curve.suggestion = steepest_descent_lr(curve);
    return curve;
}

template <class T>
LrCurve lr_find(const Model<T>& model, const TraceSet& data, const OptimizerConfig& opt, std::size_t batch_size,
                const LrFindConfig& cfg, std::uint64_t seed) {
    if (!data.meta.labels) throw MissingMetadata("lr_find needs labelled traces");
    if (data.n_traces() == 0 || batch_size == 0) throw EmptyTraceSet("lr_find needs traces and a positive batch size");
    opt.validate();
    Model<T> work = model;
    work.mode = Mode::Train;
    OptimizerState<T> state;
    std::vector<std::size_t> order(data.n_traces());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed, "lr-find");
    rng.shuffle(order.begin(), order.end());
    std::size_t cursor = 0;

    auto step = [&](std::size_t, double lr) {
        std::vector<std::size_t> rows;
        std::vector<std::uint8_t> labels;
        for (std::size_t k = 0; k < std::min(batch_size, data.n_traces()); ++k) {
            if (cursor == order.size()) {
                rng.shuffle(order.begin(), order.end());
                cursor = 0;
            }
            rows.push_back(order[cursor]);
            labels.push_back((*data.meta.labels)[order[cursor]]);
            ++cursor;
        }
        auto res = compute_gradients(work, batch_from<T>(data, rows), labels);
        if (!std::isfinite(res.loss)) return res.loss;
        try {
            opt_step(opt, state, work.params, res.grads, lr);
        } catch (const NonFiniteGradient&) {
            return std::numeric_limits<double>::quiet_NaN();
        }
        return res.loss;
    };
    return lr_find(step, cfg);
}

template void opt_step<float>(const OptimizerConfig&, OptimizerState<float>&, ParamMap<float>&, const Gradients<float>&, double);
template void opt_step<double>(const OptimizerConfig&, OptimizerState<double>&, ParamMap<double>&, const Gradients<double>&, double);
template void swa_update<float>(SwaState<float>&, const ParamMap<float>&);
template void swa_update<double>(SwaState<double>&, const ParamMap<double>&);
template LrCurve lr_find<float>(const Model<float>&, const TraceSet&, const OptimizerConfig&, std::size_t, const LrFindConfig&, std::uint64_t);
template LrCurve lr_find<double>(const Model<double>&, const TraceSet&, const OptimizerConfig&, std::size_t, const LrFindConfig&, std::uint64_t);

}  // namespace scaforge

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

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "scaforge/nn.hpp"
#include "scaforge/traceset.hpp"

namespace scaforge {

using ScoreVector = std::array<double, 256>;

/// Probabilities are clamped to this floor before taking logs, so a single
/// confident wrong prediction cannot drive an accumulator to -inf.
inline constexpr double kProbabilityFloor = 1e-40;

/// score[k] = log probs[SBox(plaintext_byte ^ k)].
ScoreVector hypothesis_scores(std::span<const double> probs, std::uint8_t plaintext_byte);

struct ScoreAccumulator {
    ScoreVector cum_loglik{};
    std::size_t n_traces_seen = 0;
    std::size_t target_byte = kDefaultTargetByte;
};

void accumulate(ScoreAccumulator& acc, const ScoreVector& scores);

/// Number of hypotheses ranked ahead of the true key: strictly higher score,
/// or an equal score and a smaller key byte. Ties therefore never flatter
/// the attack.
int key_rank(const ScoreAccumulator& acc, std::uint8_t true_key_byte);

struct GeConfig {
    std::size_t repetitions = 100;
    std::size_t max_traces = 1000;
    std::size_t step = 10;
    std::uint64_t seed = 0;
    std::size_t target_byte = kDefaultTargetByte;
};

struct GECurve {
    std::vector<std::size_t> n_traces;  // 1, step, 2*step, ..., max_traces
    std::vector<double> mean_rank;
    std::size_t repetitions = 0;
    std::uint64_t seed = 0;
    /// First trace count whose mean rank is below 0.5, evaluated at every
    /// trace count (not only the sampled axis).
    std::optional<std::size_t> traces_to_zero;
};

/// Guessing entropy from per-trace class probabilities (N x 256, row-major).
/// Each repetition shuffles the attack traces with its own seeded stream and
/// accumulates scores trace by trace. Throws MixedKeys when the attack set
/// does not share a single key.
GECurve guessing_entropy(std::span<const double> probs, const TraceSet& attack, const GeConfig& cfg);

template <class T>
GECurve guessing_entropy(const Model<T>& model, const TraceSet& attack, const GeConfig& cfg);

/// Axis used by GECurve for the given limits.
std::vector<std::size_t> ge_axis(std::size_t max_traces, std::size_t step);

}  // namespace scaforge

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

#include "scaforge/attack.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "scaforge/aes.hpp"
#include "scaforge/errors.hpp"
#include "scaforge/rng.hpp"

namespace scaforge {

ScoreVector hypothesis_scores(std::span<const double> probs, std::uint8_t plaintext_byte) {
    if (probs.size() != 256) throw ShapeMismatch("hypothesis_scores expects 256 class probabilities");
    ScoreVector scores;
    for (int k = 0; k < 256; ++k) {
        const double p = probs[aes_sbox(static_cast<std::uint8_t>(plaintext_byte ^ k))];
        scores[k] = std::log(std::max(p, kProbabilityFloor));
    }
    return scores;
}

void accumulate(ScoreAccumulator& acc, const ScoreVector& scores) {
    for (std::size_t k = 0; k < 256; ++k) acc.cum_loglik[k] += scores[k];
    ++acc.n_traces_seen;
}

int key_rank(const ScoreAccumulator& acc, std::uint8_t true_key_byte) {
    const double truth = acc.cum_loglik[true_key_byte];
    int rank = 0;
    for (int k = 0; k < 256; ++k) {
        if (k == true_key_byte) continue;
        const double s = acc.cum_loglik[k];
        if (s > truth || (s == truth && k < true_key_byte)) ++rank;
    }
    return rank;
}

std::vector<std::size_t> ge_axis(std::size_t max_traces, std::size_t step) {
    std::vector<std::size_t> axis;
    if (max_traces == 0) return axis;
    step = std::max<std::size_t>(step, 1);
    axis.push_back(1);
    for (std::size_t n = step; n <= max_traces; n += step)
        if (n > axis.back()) axis.push_back(n);
    if (axis.back() != max_traces) axis.push_back(max_traces);
    return axis;
}

GECurve guessing_entropy(std::span<const double> probs, const TraceSet& attack, const GeConfig& cfg) {
    const std::size_t n = attack.n_traces();
    if (probs.size() != n * 256) throw ShapeMismatch("probability matrix does not match the attack set");
    if (!attack.meta.plaintexts || !attack.meta.keys) throw MissingMetadata("guessing entropy needs plaintexts and keys");
    if (n == 0) throw EmptyTraceSet("attack set is empty");
    if (cfg.repetitions == 0 || cfg.max_traces == 0) throw InvalidConfig("guessing entropy needs repetitions and max_traces > 0");
    const auto& keys = *attack.meta.keys;
    for (std::size_t i = 1; i < n; ++i)
        if (keys[i] != keys[0]) throw MixedKeys("attack traces do not share a single key (trace " + std::to_string(i) + ")");

    if (cfg.target_byte >= 16) throw InvalidConfig("target byte must be in 0..15");
    ScoreAccumulator proto;
    proto.target_byte = cfg.target_byte;
    const std::size_t tb = cfg.target_byte;
    const std::uint8_t true_key = keys[0][tb];
    const std::size_t max_traces = std::min(cfg.max_traces, n);

    // Per-trace scores are shared by all repetitions.
    std::vector<ScoreVector> scores(n);
    for (std::size_t i = 0; i < n; ++i)
        scores[i] = hypothesis_scores(probs.subspan(i * 256, 256), (*attack.meta.plaintexts)[i][tb]);

    std::vector<double> rank_sum(max_traces, 0.0);
    std::vector<std::size_t> order(n);
    for (std::size_t r = 0; r < cfg.repetitions; ++r) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(cfg.seed, "ge-repetition", r);
        rng.shuffle(order.begin(), order.end());
        ScoreAccumulator acc = proto;
        for (std::size_t j = 0; j < max_traces; ++j) {
            accumulate(acc, scores[order[j]]);
            rank_sum[j] += key_rank(acc, true_key);
        }
    }

    GECurve curve;
    curve.repetitions = cfg.repetitions;
    curve.seed = cfg.seed;
    curve.n_traces = ge_axis(max_traces, cfg.step);
    const double reps = static_cast<double>(cfg.repetitions);
    for (std::size_t x : curve.n_traces) curve.mean_rank.push_back(rank_sum[x - 1] / reps);
    for (std::size_t j = 0; j < max_traces; ++j) {
        if (rank_sum[j] / reps < 0.5) {
            curve.traces_to_zero = j + 1;
            break;
        }
    }
    return curve;
}

template <class T>
GECurve guessing_entropy(const Model<T>& model, const TraceSet& attack, const GeConfig& cfg) {
    const auto probs = predict_proba(model, attack);
    return guessing_entropy(probs, attack, cfg);
}

template GECurve guessing_entropy<float>(const Model<float>&, const TraceSet&, const GeConfig&);
template GECurve guessing_entropy<double>(const Model<double>&, const TraceSet&, const GeConfig&);

}  // namespace scaforge

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

#include "scaforge/synth.hpp"

#include <cmath>

#include "scaforge/aes.hpp"
#include "scaforge/errors.hpp"
#include "scaforge/rng.hpp"

namespace scaforge {

void SynthConfig::validate() const {
    if (n_samples == 0) throw InvalidConfig("synth: n_samples must be positive");
    if (leak_pos_masked >= n_samples || leak_pos_mask >= n_samples)
        throw InvalidConfig("synth: leak positions must be < n_samples");
    if (leak_pos_masked == leak_pos_mask) throw InvalidConfig("synth: leak positions must be distinct");
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw InvalidConfig("synth: sigma must be finite and >= 0");
    if (4 * max_desync >= n_samples && max_desync != 0) throw InvalidConfig("synth: max_desync must be < n_samples/4");
    if (target_byte >= 16) throw InvalidConfig("synth: target_byte must be in 0..15");
}

TraceSet generate(const SynthConfig& cfg) {
    cfg.validate();
    const std::size_t n = cfg.n_traces;
    const std::size_t s = cfg.n_samples;
    const std::size_t tb = cfg.target_byte;

    TraceSet ts(n, s, Dtype::F32);
    std::vector<Block16> keys(n);
    std::vector<Block16> plaintexts(n);
    std::vector<std::uint8_t> masks(n);
    std::vector<std::uint8_t> labels(n);
    std::vector<float> row(s);

    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(cfg.seed, "synth-trace", i);
        for (auto& b : plaintexts[i]) b = rng.byte();
        if (cfg.fixed_key) {
            keys[i] = *cfg.fixed_key;
        } else {
            for (auto& b : keys[i]) b = rng.byte();
        }
        const std::uint8_t drawn_mask = rng.byte();
        const std::uint8_t mask = cfg.unprotected ? std::uint8_t{0} : drawn_mask;
        const std::uint8_t label = aes_sbox(plaintexts[i][tb] ^ keys[i][tb]);
        masks[i] = mask;
        labels[i] = label;

        for (auto& v : row) v = static_cast<float>(cfg.sigma * rng.normal());
        row[cfg.leak_pos_masked] += static_cast<float>(hamming_weight(label ^ mask));
        row[cfg.leak_pos_mask] += static_cast<float>(hamming_weight(mask));

        auto dst = ts.trace(i);
        if (cfg.max_desync > 0) {
            const auto m = static_cast<std::int64_t>(cfg.max_desync);
            const auto shifted = shift_trace(row, rng.uniform_int(-m, m));
            std::copy(shifted.begin(), shifted.end(), dst.begin());
        } else {
            std::copy(row.begin(), row.end(), dst.begin());
        }
    }

    ts.meta.keys = std::move(keys);
    ts.meta.plaintexts = std::move(plaintexts);
    ts.meta.mask_len = 1;
    ts.meta.masks = std::move(masks);
    ts.meta.labels = std::move(labels);
    return ts;
}

}  // namespace scaforge

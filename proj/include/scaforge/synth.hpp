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
#include <optional>

#include "scaforge/traceset.hpp"

namespace scaforge {

constexpr int hamming_weight(std::uint8_t x) {
    int n = 0;
    for (; x != 0; x &= static_cast<std::uint8_t>(x - 1)) ++n;
    return n;
}

/// Simulated first-order boolean-masked AES S-box leakage.
///
/// Each trace is i.i.d. Gaussian noise with two additive Hamming-weight
/// leaks: HW(SBox(p ^ k) ^ m) at `leak_pos_masked` and HW(m) at
/// `leak_pos_mask`. With `unprotected` set the mask is forced to zero, so
/// the first point leaks HW(label) directly and the second carries nothing.
struct SynthConfig {
    std::size_t n_traces = 1000;
    std::size_t n_samples = 100;
    double sigma = 1.0;
    std::size_t leak_pos_masked = 30;
    std::size_t leak_pos_mask = 60;
    std::size_t max_desync = 0;
    std::optional<Block16> fixed_key;  // nullopt: a fresh random key per trace
    std::uint64_t seed = 0;
    bool unprotected = false;
    std::size_t target_byte = kDefaultTargetByte;

    /// Throws InvalidConfig naming the violated constraint.
    void validate() const;
};

/// Deterministic in `cfg`. Each trace draws from its own counter-derived
/// stream, so the output does not depend on how traces are partitioned.
TraceSet generate(const SynthConfig& cfg);

}  // namespace scaforge

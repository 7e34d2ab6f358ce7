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
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "scaforge/attack.hpp"
#include "scaforge/optim.hpp"
#include "scaforge/synth.hpp"
#include "scaforge/train.hpp"

namespace scaforge {

struct DataConfig {
    std::optional<std::filesystem::path> path;
    std::optional<SynthConfig> synth;
    std::size_t target_byte = kDefaultTargetByte;
    std::optional<std::pair<std::size_t, std::size_t>> window;  // start, length
    std::optional<StandardizeMode> standardize;                  // nullopt: none
};

struct AttackConfig {
    GeConfig ge;
    std::optional<std::filesystem::path> path;
    /// Merged over data.synth; the attack set always uses one fixed key.
    std::optional<SynthConfig> synth;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    DataConfig data;
    nlohmann::json model;  // {"preset": name} or {"layers": [...]}
    TrainConfig train;
    std::optional<std::size_t> ref_batch;  // linear learning-rate scaling when set
    AttackConfig attack;
    LrFindConfig lr_find;
    std::string snr_partition = "label";
};

/// Applies dotted-key overrides ("train.epochs=5"). Values are parsed as
/// JSON when possible and taken as strings otherwise. Repeated or
/// overlapping keys throw UsageError.
void apply_overrides(nlohmann::json& doc, const std::vector<std::string>& assignments);

/// Validates and converts an experiment document; unknown keys are errors.
ExperimentConfig parse_experiment(const nlohmann::json& doc);

Block16 parse_key_hex(const std::string& hex);
std::string key_hex(const Block16& key);

/// Entry point behind the `scaforge` executable. Returns 0 on success, 1 on
/// usage or configuration errors, 2 on runtime failures.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace scaforge

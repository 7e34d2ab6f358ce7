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
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "scaforge/nn.hpp"
#include "scaforge/traceset.hpp"

namespace scaforge {

/// Maps a trace index to its class (0..255) for SNR partitioning.
using ClassFn = std::function<std::uint8_t(std::size_t)>;

/// Common partitions over a labelled / masked trace set.
ClassFn partition_by_label(const TraceSet& ts);
ClassFn partition_by_mask(const TraceSet& ts);
ClassFn partition_by_masked_label(const TraceSet& ts);

struct SnrReport {
    std::vector<double> values;
    std::string partition;
    std::vector<std::size_t> class_counts;  // 256 entries
    /// Set when some sample had zero mean within-class variance; its SNR is
    /// reported as 0.
    bool degenerate_variance = false;
};

/// First-order SNR per sample: variance over classes of the class means,
/// divided by the mean over classes of the within-class (population)
/// variance. Classes with fewer than two traces are left out of both.
SnrReport snr(const TraceSet& ts, const ClassFn& class_of, std::string partition = "custom");

/// Mean over traces of |d loss / d input_t| at the true label, computed in
/// inference mode.
template <class T>
std::vector<double> saliency(const Model<T>& model, const TraceSet& ts, std::size_t batch = 256);

using NamedSeries = std::vector<std::pair<std::string, std::vector<double>>>;

/// CSV with a header row and one row per index. `index_name` adds a
/// leading integer index column; numbers use the shortest round-trip form.
void export_csv(const NamedSeries& series, const std::filesystem::path& path,
                const std::optional<std::string>& index_name = std::string("index"));
std::string format_csv(const NamedSeries& series, const std::optional<std::string>& index_name = std::string("index"));

/// Parses a numeric CSV written by `export_csv` (all columns, index included).
NamedSeries read_csv(const std::filesystem::path& path);

/// Shortest decimal string that parses back to the same double.
std::string format_number(double v);

}  // namespace scaforge

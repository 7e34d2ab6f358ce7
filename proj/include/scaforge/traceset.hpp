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
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "scaforge/errors.hpp"
#include "scaforge/rng.hpp"

namespace scaforge {

enum class Dtype : std::uint8_t { I8 = 0, I16 = 1, F32 = 2 };

std::string to_string(Dtype dtype);

using Block16 = std::array<std::uint8_t, 16>;

/// Per-trace metadata, stored column-wise. An absent block is `nullopt`;
/// a present block always holds one entry per trace.
struct TraceMeta {
    std::optional<std::vector<Block16>> keys;
    std::optional<std::vector<Block16>> plaintexts;
    std::optional<std::vector<std::uint8_t>> masks;  // n_traces * mask_len, row-major
    std::uint8_t mask_len = 0;
    std::optional<std::vector<std::uint8_t>> labels;

    bool operator==(const TraceMeta&) const = default;
};

enum class StandardizeMode { Pointwise, Global };

std::string to_string(StandardizeMode mode);
StandardizeMode parse_standardize_mode(const std::string& name);

/// Statistics used by `standardize`. Pointwise stats hold one entry per
/// sample; global stats hold a single entry.
struct PreprocessStats {
    StandardizeMode mode = StandardizeMode::Pointwise;
    std::vector<double> mean;
    std::vector<double> std;
    double epsilon = 1e-8;

    bool operator==(const PreprocessStats&) const = default;
};

/// N traces x S samples. Samples are held as f32 whatever the declared
/// storage dtype; i8 and i16 values are exactly representable, and the
/// declared dtype decides the on-disk encoding.
class TraceSet {
public:
    TraceSet() = default;
    TraceSet(std::size_t n_traces, std::size_t n_samples, Dtype dtype = Dtype::F32);

    std::size_t n_traces() const { return n_traces_; }
    std::size_t n_samples() const { return n_samples_; }
    Dtype dtype() const { return dtype_; }
    void set_dtype(Dtype dtype) { dtype_ = dtype; }

    std::span<const float> samples() const { return samples_; }
    std::span<float> samples() { return samples_; }
    std::span<const float> trace(std::size_t i) const { return {samples_.data() + i * n_samples_, n_samples_}; }
    std::span<float> trace(std::size_t i) { return {samples_.data() + i * n_samples_, n_samples_}; }
    float at(std::size_t i, std::size_t t) const { return samples_[i * n_samples_ + t]; }
    float& at(std::size_t i, std::size_t t) { return samples_[i * n_samples_ + t]; }

    TraceMeta meta;
    std::optional<PreprocessStats> stats;

    /// Throws InvalidConfig when metadata lengths disagree with n_traces or
    /// samples do not fit the declared dtype.
    void validate() const;

    /// Rows `indices` in the given order, metadata included.
    TraceSet select(std::span<const std::size_t> indices) const;

    /// Compares shape, dtype, samples (bitwise) and metadata. `stats` is
    /// not part of the file format and is ignored.
    bool operator==(const TraceSet& other) const;

private:
    std::size_t n_traces_ = 0;
    std::size_t n_samples_ = 0;
    Dtype dtype_ = Dtype::F32;
    std::vector<float> samples_;
};

// SCAT v1 on-disk format.
inline constexpr std::array<char, 4> kScatMagic = {'S', 'C', 'A', 'T'};
inline constexpr std::uint16_t kScatVersion = 1;
inline constexpr std::size_t kScatHeaderSize = 32;

enum ScatFlags : std::uint16_t {
    kFlagKeys = 1u << 0,
    kFlagPlaintexts = 1u << 1,
    kFlagMasks = 1u << 2,
    kFlagLabels = 1u << 3,
};

struct ScatHeader {
    std::uint16_t version = kScatVersion;
    std::uint16_t flags = 0;
    std::uint64_t n_traces = 0;
    std::uint32_t n_samples = 0;
    Dtype dtype = Dtype::F32;
    std::uint8_t mask_len = 0;

    std::size_t sample_bytes() const;
    std::size_t payload_bytes() const;
};

void write_traceset(std::ostream& os, const TraceSet& ts);
TraceSet read_traceset(std::istream& is);
ScatHeader read_scat_header(std::istream& is);

void save_traceset(const TraceSet& ts, const std::filesystem::path& path);
TraceSet load_traceset(const std::filesystem::path& path);
ScatHeader load_scat_header(const std::filesystem::path& path);

/// Conventional ASCAD target byte.
inline constexpr std::size_t kDefaultTargetByte = 2;

/// label[i] = SBox(plaintext[i][target_byte] ^ key[i][target_byte]).
TraceSet derive_labels(const TraceSet& ts, std::size_t target_byte = kDefaultTargetByte);

struct Standardized {
    TraceSet traces;
    PreprocessStats stats;
};

/// Column-wise (pointwise) or whole-set (global) standardization. When
/// `stats` is given it is applied as-is, which is how profiling statistics
/// carry over to an attack set.
Standardized standardize(const TraceSet& ts, StandardizeMode mode,
                         const std::optional<PreprocessStats>& stats = std::nullopt, double epsilon = 1e-8);

/// Shift by `d` samples (positive moves content right); vacated positions
/// take the nearest edge value.
std::vector<float> shift_trace(std::span<const float> trace, std::int64_t d);

/// Shift by d drawn uniformly from [-max_shift, max_shift].
std::vector<float> random_shift(std::span<const float> trace, std::size_t max_shift, Rng& rng);

TraceSet window(const TraceSet& ts, std::size_t start, std::size_t len);

}  // namespace scaforge

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

#include "scaforge/traceset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

#include "scaforge/aes.hpp"
#include "scaforge/errors.hpp"

namespace scaforge {

std::string to_string(Dtype dtype) {
    switch (dtype) {
        case Dtype::I8: return "i8";
        case Dtype::I16: return "i16";
        case Dtype::F32: return "f32";
    }
    return "?";
}

std::string to_string(StandardizeMode mode) {
    return mode == StandardizeMode::Pointwise ? "pointwise" : "global";
}

StandardizeMode parse_standardize_mode(const std::string& name) {
    if (name == "pointwise") return StandardizeMode::Pointwise;
    if (name == "global") return StandardizeMode::Global;
    throw InvalidConfig("unknown standardization mode '" + name + "'");
}

namespace {

std::size_t dtype_size(Dtype dtype) {
    switch (dtype) {
        case Dtype::I8: return 1;
        case Dtype::I16: return 2;
        case Dtype::F32: return 4;
    }
    throw UnsupportedDtype("unsupported dtype code " + std::to_string(static_cast<int>(dtype)));
}

bool representable(float v, Dtype dtype) {
    switch (dtype) {
        case Dtype::F32: return true;
        case Dtype::I8: return v == std::trunc(v) && v >= -128.0f && v <= 127.0f;
        case Dtype::I16: return v == std::trunc(v) && v >= -32768.0f && v <= 32767.0f;
    }
    return false;
}

std::size_t checked_mul(std::size_t a, std::size_t b) {
    if (a != 0 && b > std::numeric_limits<std::size_t>::max() / a) throw FormatError("size overflow in SCAT header");
    return a * b;
}

// Little-endian byte buffer helpers.
class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u16(std::uint16_t v) {
        for (int i = 0; i < 2; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void bytes(const std::uint8_t* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }
    void zeros(std::size_t n) { buf_.insert(buf_.end(), n, 0); }
    std::vector<std::uint8_t>& data() { return buf_; }

private:
    std::vector<std::uint8_t> buf_;
};

std::uint16_t get_u16(const std::uint8_t* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }
std::uint32_t get_u32(const std::uint8_t* p) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}
std::uint64_t get_u64(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

void read_exact(std::istream& is, std::uint8_t* dst, std::size_t n, const char* what) {
    is.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n) throw TruncatedFile(std::string("SCAT file truncated in ") + what);
}

// Bytes left in a seekable stream, or nullopt.
std::optional<std::uint64_t> remaining_bytes(std::istream& is) {
    const auto here = is.tellg();
    if (here < 0) return std::nullopt;
    is.seekg(0, std::ios::end);
    const auto end = is.tellg();
    is.seekg(here);
    if (end < 0 || !is) {
        is.clear();
        return std::nullopt;
    }
    return static_cast<std::uint64_t>(end - here);
}

}  // namespace

TraceSet::TraceSet(std::size_t n_traces, std::size_t n_samples, Dtype dtype)
    : n_traces_(n_traces), n_samples_(n_samples), dtype_(dtype), samples_(n_traces * n_samples, 0.0f) {}

void TraceSet::validate() const {
    if (samples_.size() != n_traces_ * n_samples_) throw InvalidConfig("sample buffer does not match n_traces x n_samples");
    const auto check = [&](std::size_t got, std::size_t want, const char* what) {
        if (got != want) {
            throw InvalidConfig(std::string(what) + " has " + std::to_string(got) + " entries, expected " +
                                std::to_string(want));
        }
    };
    if (meta.keys) check(meta.keys->size(), n_traces_, "key block");
    if (meta.plaintexts) check(meta.plaintexts->size(), n_traces_, "plaintext block");
    if (meta.masks) check(meta.masks->size(), n_traces_ * meta.mask_len, "mask block");
    if (meta.labels) check(meta.labels->size(), n_traces_, "label block");
    for (float v : samples_) {
        if (!representable(v, dtype_)) {
            throw UnsupportedDtype("sample value " + std::to_string(v) + " not representable as " + to_string(dtype_));
        }
    }
}

TraceSet TraceSet::select(std::span<const std::size_t> indices) const {
    TraceSet out(indices.size(), n_samples_, dtype_);
    out.stats = stats;
    out.meta.mask_len = meta.mask_len;
    if (meta.keys) out.meta.keys.emplace();
    if (meta.plaintexts) out.meta.plaintexts.emplace();
    if (meta.masks) out.meta.masks.emplace();
    if (meta.labels) out.meta.labels.emplace();
    for (std::size_t r = 0; r < indices.size(); ++r) {
        const std::size_t i = indices[r];
        if (i >= n_traces_) throw OutOfBounds("trace index " + std::to_string(i) + " out of range");
        std::copy_n(trace(i).begin(), n_samples_, out.trace(r).begin());
        if (meta.keys) out.meta.keys->push_back((*meta.keys)[i]);
        if (meta.plaintexts) out.meta.plaintexts->push_back((*meta.plaintexts)[i]);
        if (meta.masks) {
            const auto first = meta.masks->begin() + static_cast<std::ptrdiff_t>(i * meta.mask_len);
            out.meta.masks->insert(out.meta.masks->end(), first, first + meta.mask_len);
        }
        if (meta.labels) out.meta.labels->push_back((*meta.labels)[i]);
    }
    return out;
}

bool TraceSet::operator==(const TraceSet& other) const {
    if (n_traces_ != other.n_traces_ || n_samples_ != other.n_samples_ || dtype_ != other.dtype_) return false;
    if (!(meta == other.meta)) return false;
    return samples_.size() == other.samples_.size() &&
           std::memcmp(samples_.data(), other.samples_.data(), samples_.size() * sizeof(float)) == 0;
}

std::size_t ScatHeader::sample_bytes() const {
    return checked_mul(checked_mul(static_cast<std::size_t>(n_traces), n_samples), dtype_size(dtype));
}

std::size_t ScatHeader::payload_bytes() const {
    std::size_t per_trace = 0;
    if (flags & kFlagKeys) per_trace += 16;
    if (flags & kFlagPlaintexts) per_trace += 16;
    if (flags & kFlagMasks) per_trace += mask_len;
    if (flags & kFlagLabels) per_trace += 1;
    const std::size_t meta_bytes = checked_mul(static_cast<std::size_t>(n_traces), per_trace);
    const std::size_t samples = sample_bytes();
    if (samples > std::numeric_limits<std::size_t>::max() - meta_bytes) throw FormatError("size overflow in SCAT header");
    return samples + meta_bytes;
}

void write_traceset(std::ostream& os, const TraceSet& ts) {
    ts.validate();
    if (ts.n_samples() > std::numeric_limits<std::uint32_t>::max()) throw FormatError("n_samples exceeds u32");

    std::uint16_t flags = 0;
    if (ts.meta.keys) flags |= kFlagKeys;
    if (ts.meta.plaintexts) flags |= kFlagPlaintexts;
    if (ts.meta.masks) flags |= kFlagMasks;
    if (ts.meta.labels) flags |= kFlagLabels;

    ByteWriter w;
    w.bytes(reinterpret_cast<const std::uint8_t*>(kScatMagic.data()), kScatMagic.size());
    w.u16(kScatVersion);
    w.u16(flags);
    w.u64(ts.n_traces());
    w.u32(static_cast<std::uint32_t>(ts.n_samples()));
    w.u8(static_cast<std::uint8_t>(ts.dtype()));
    w.u8(ts.meta.masks ? ts.meta.mask_len : 0);
    w.zeros(10);

    for (float v : ts.samples()) {
        switch (ts.dtype()) {
            case Dtype::I8: w.u8(static_cast<std::uint8_t>(static_cast<std::int8_t>(v))); break;
            case Dtype::I16: w.u16(static_cast<std::uint16_t>(static_cast<std::int16_t>(v))); break;
            case Dtype::F32: w.u32(std::bit_cast<std::uint32_t>(v)); break;
        }
    }
    if (ts.meta.keys)
        for (const auto& k : *ts.meta.keys) w.bytes(k.data(), k.size());
    if (ts.meta.plaintexts)
        for (const auto& p : *ts.meta.plaintexts) w.bytes(p.data(), p.size());
    if (ts.meta.masks) w.bytes(ts.meta.masks->data(), ts.meta.masks->size());
    if (ts.meta.labels) w.bytes(ts.meta.labels->data(), ts.meta.labels->size());

    os.write(reinterpret_cast<const char*>(w.data().data()), static_cast<std::streamsize>(w.data().size()));
    if (!os) throw IoError("failed writing SCAT stream");
}

ScatHeader read_scat_header(std::istream& is) {
    std::array<std::uint8_t, kScatHeaderSize> raw{};
    is.read(reinterpret_cast<char*>(raw.data()), 4);
    if (is.gcount() != 4 || std::memcmp(raw.data(), kScatMagic.data(), 4) != 0) throw BadMagic("not a SCAT file (bad magic)");
    read_exact(is, raw.data() + 4, kScatHeaderSize - 4, "header");

    ScatHeader h;
    h.version = get_u16(&raw[4]);
    if (h.version != kScatVersion) throw UnsupportedVersion("unsupported SCAT version " + std::to_string(h.version));
    h.flags = get_u16(&raw[6]);
    if (h.flags & ~std::uint16_t{0xF}) throw FormatError("unknown SCAT flag bits");
    h.n_traces = get_u64(&raw[8]);
    h.n_samples = get_u32(&raw[16]);
    if (raw[20] > 2) throw UnsupportedDtype("unsupported dtype code " + std::to_string(raw[20]));
    h.dtype = static_cast<Dtype>(raw[20]);
    h.mask_len = raw[21];
    return h;
}

TraceSet read_traceset(std::istream& is) {
    const ScatHeader h = read_scat_header(is);
    const std::size_t payload = h.payload_bytes();
    if (const auto left = remaining_bytes(is); left && *left < payload) throw TruncatedFile("SCAT file truncated in payload");

    const std::size_t n = static_cast<std::size_t>(h.n_traces);
    TraceSet ts(n, h.n_samples, h.dtype);

    std::vector<std::uint8_t> raw(h.sample_bytes());
    read_exact(is, raw.data(), raw.size(), "samples");
    auto out = ts.samples();
    for (std::size_t i = 0; i < out.size(); ++i) {
        switch (h.dtype) {
            case Dtype::I8: out[i] = static_cast<float>(static_cast<std::int8_t>(raw[i])); break;
            case Dtype::I16: out[i] = static_cast<float>(static_cast<std::int16_t>(get_u16(&raw[2 * i]))); break;
            case Dtype::F32: out[i] = std::bit_cast<float>(get_u32(&raw[4 * i])); break;
        }
    }

    auto read_blocks = [&](const char* what) {
        std::vector<Block16> blocks(n);
        for (auto& b : blocks) read_exact(is, b.data(), b.size(), what);
        return blocks;
    };
    if (h.flags & kFlagKeys) ts.meta.keys = read_blocks("keys");
    if (h.flags & kFlagPlaintexts) ts.meta.plaintexts = read_blocks("plaintexts");
    if (h.flags & kFlagMasks) {
        ts.meta.mask_len = h.mask_len;
        ts.meta.masks.emplace(n * h.mask_len);
        read_exact(is, ts.meta.masks->data(), ts.meta.masks->size(), "masks");
    }
    if (h.flags & kFlagLabels) {
        ts.meta.labels.emplace(n);
        read_exact(is, ts.meta.labels->data(), n, "labels");
    }
    if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after SCAT payload");
    return ts;
}

void save_traceset(const TraceSet& ts, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    write_traceset(os, ts);
    os.close();
    if (!os) throw IoError("failed writing " + path.string());
}

TraceSet load_traceset(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    return read_traceset(is);
}

ScatHeader load_scat_header(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    return read_scat_header(is);
}

TraceSet derive_labels(const TraceSet& ts, std::size_t target_byte) {
    if (target_byte >= 16) throw OutOfBounds("target byte must be in 0..15");
    if (!ts.meta.keys || !ts.meta.plaintexts) throw MissingMetadata("deriving labels needs key and plaintext metadata");
    TraceSet out = ts;
    std::vector<std::uint8_t> labels(ts.n_traces());
    for (std::size_t i = 0; i < ts.n_traces(); ++i) {
        labels[i] = aes_sbox((*ts.meta.plaintexts)[i][target_byte] ^ (*ts.meta.keys)[i][target_byte]);
    }
    out.meta.labels = std::move(labels);
    return out;
}

Standardized standardize(const TraceSet& ts, StandardizeMode mode, const std::optional<PreprocessStats>& stats,
                         double epsilon) {
    const std::size_t n = ts.n_traces();
    const std::size_t s = ts.n_samples();
    const std::size_t width = mode == StandardizeMode::Pointwise ? s : 1;

    PreprocessStats st;
    if (stats) {
        if (stats->mode != mode) throw InvalidConfig("standardization stats were computed in a different mode");
        if (stats->mean.size() != width || stats->std.size() != width)
            throw ShapeMismatch("standardization stats do not match the trace width");
        if (!(stats->epsilon >= 0.0)) throw InvalidConfig("standardization epsilon must be >= 0");
        st = *stats;
    } else {
        if (n == 0 || s == 0) throw EmptyTraceSet("cannot compute statistics of an empty trace set");
        if (!(epsilon >= 0.0)) throw InvalidConfig("standardization epsilon must be >= 0");
        st.mode = mode;
        st.epsilon = epsilon;
        st.mean.assign(width, 0.0);
        st.std.assign(width, 0.0);
        // Two passes in double: mean, then population variance.
        if (mode == StandardizeMode::Pointwise) {
            for (std::size_t i = 0; i < n; ++i) {
                const auto row = ts.trace(i);
                for (std::size_t t = 0; t < s; ++t) st.mean[t] += row[t];
            }
            for (auto& m : st.mean) m /= static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
                const auto row = ts.trace(i);
                for (std::size_t t = 0; t < s; ++t) {
                    const double d = row[t] - st.mean[t];
                    st.std[t] += d * d;
                }
            }
            for (auto& v : st.std) v = std::sqrt(v / static_cast<double>(n));
        } else {
            double sum = 0.0;
            for (float v : ts.samples()) sum += v;
            const double mean = sum / static_cast<double>(n * s);
            double ss = 0.0;
            for (float v : ts.samples()) ss += (v - mean) * (v - mean);
            st.mean[0] = mean;
            st.std[0] = std::sqrt(ss / static_cast<double>(n * s));
        }
    }

    TraceSet out = ts;
    out.set_dtype(Dtype::F32);
    for (std::size_t i = 0; i < n; ++i) {
        auto row = out.trace(i);
        for (std::size_t t = 0; t < s; ++t) {
            const std::size_t c = width == 1 ? 0 : t;
            // A flat column with epsilon 0 would divide by zero; it maps to 0.
            const double denom = st.std[c] + st.epsilon;
            row[t] = denom > 0.0 ? static_cast<float>((row[t] - st.mean[c]) / denom) : 0.0f;
        }
    }
    out.stats = st;
    return {std::move(out), std::move(st)};
}

std::vector<float> shift_trace(std::span<const float> trace, std::int64_t d) {
    const auto n = static_cast<std::int64_t>(trace.size());
    std::vector<float> out(trace.size());
    for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = trace[static_cast<std::size_t>(std::clamp<std::int64_t>(i - d, 0, n - 1))];
    return out;
}

std::vector<float> random_shift(std::span<const float> trace, std::size_t max_shift, Rng& rng) {
    if (max_shift >= trace.size() && max_shift != 0) throw ShiftTooLarge("max_shift must be smaller than the trace length");
    if (max_shift == 0) return {trace.begin(), trace.end()};
    const auto m = static_cast<std::int64_t>(max_shift);
    return shift_trace(trace, rng.uniform_int(-m, m));
}

TraceSet window(const TraceSet& ts, std::size_t start, std::size_t len) {
    if (start > ts.n_samples() || len > ts.n_samples() - start) {
        throw OutOfBounds("window [" + std::to_string(start) + ", " + std::to_string(start + len) + ") exceeds " +
                          std::to_string(ts.n_samples()) + " samples");
    }
    TraceSet out(ts.n_traces(), len, ts.dtype());
    out.meta = ts.meta;
    for (std::size_t i = 0; i < ts.n_traces(); ++i) {
        const auto row = ts.trace(i);
        std::copy_n(row.begin() + static_cast<std::ptrdiff_t>(start), len, out.trace(i).begin());
    }
    if (ts.stats && ts.stats->mode == StandardizeMode::Pointwise) {
        PreprocessStats st = *ts.stats;
        st.mean.assign(ts.stats->mean.begin() + static_cast<std::ptrdiff_t>(start),
                       ts.stats->mean.begin() + static_cast<std::ptrdiff_t>(start + len));
        st.std.assign(ts.stats->std.begin() + static_cast<std::ptrdiff_t>(start),
                      ts.stats->std.begin() + static_cast<std::ptrdiff_t>(start + len));
        out.stats = st;
    } else {
        out.stats = ts.stats;
    }
    return out;
}

}  // namespace scaforge

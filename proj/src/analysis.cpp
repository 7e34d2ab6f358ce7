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

#include "scaforge/analysis.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "scaforge/errors.hpp"

namespace scaforge {

ClassFn partition_by_label(const TraceSet& ts) {
    if (!ts.meta.labels) throw MissingMetadata("label partition needs labels");
    const auto* labels = &*ts.meta.labels;
    return [labels](std::size_t i) { return (*labels)[i]; };
}

ClassFn partition_by_mask(const TraceSet& ts) {
    if (!ts.meta.masks || ts.meta.mask_len == 0) throw MissingMetadata("mask partition needs masks");
    const auto* masks = &*ts.meta.masks;
    const std::size_t len = ts.meta.mask_len;
    return [masks, len](std::size_t i) { return (*masks)[i * len]; };
}

ClassFn partition_by_masked_label(const TraceSet& ts) {
    if (!ts.meta.labels || !ts.meta.masks || ts.meta.mask_len == 0)
        throw MissingMetadata("masked-label partition needs labels and masks");
    const auto* labels = &*ts.meta.labels;
    const auto* masks = &*ts.meta.masks;
    const std::size_t len = ts.meta.mask_len;
    return [labels, masks, len](std::size_t i) { return static_cast<std::uint8_t>((*labels)[i] ^ (*masks)[i * len]); };
}

SnrReport snr(const TraceSet& ts, const ClassFn& class_of, std::string partition) {
    const std::size_t n = ts.n_traces();
    const std::size_t s = ts.n_samples();
    SnrReport rep;
    rep.partition = std::move(partition);
    rep.class_counts.assign(256, 0);

    std::vector<std::uint8_t> cls(n);
    for (std::size_t i = 0; i < n; ++i) {
        cls[i] = class_of(i);
        ++rep.class_counts[cls[i]];
    }
    std::vector<std::size_t> used;
    for (std::size_t c = 0; c < 256; ++c)
        if (rep.class_counts[c] >= 2) used.push_back(c);
    if (used.size() < 2) throw InsufficientClasses("SNR needs at least two classes with two or more traces");

    // Pass 1: class means.
    std::vector<double> mean(256 * s, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = ts.trace(i);
        double* m = mean.data() + cls[i] * s;
        for (std::size_t t = 0; t < s; ++t) m[t] += row[t];
    }
    for (std::size_t c = 0; c < 256; ++c) {
        if (rep.class_counts[c] == 0) continue;
        const double k = static_cast<double>(rep.class_counts[c]);
        for (std::size_t t = 0; t < s; ++t) mean[c * s + t] /= k;
    }
    // Pass 2: within-class sums of squares.
    std::vector<double> ss(256 * s, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = ts.trace(i);
        const double* m = mean.data() + cls[i] * s;
        double* q = ss.data() + cls[i] * s;
        for (std::size_t t = 0; t < s; ++t) {
            const double d = row[t] - m[t];
            q[t] += d * d;
        }
    }

    const double k = static_cast<double>(used.size());
    rep.values.assign(s, 0.0);
    for (std::size_t t = 0; t < s; ++t) {
        double mu = 0.0;
        for (std::size_t c : used) mu += mean[c * s + t];
        mu /= k;
        double signal = 0.0, noise = 0.0;
        for (std::size_t c : used) {
            const double d = mean[c * s + t] - mu;
            signal += d * d;
            noise += ss[c * s + t] / static_cast<double>(rep.class_counts[c]);
        }
        signal /= k;
        noise /= k;
        if (noise > 0.0) {
            rep.values[t] = signal / noise;
        } else {
            rep.degenerate_variance = true;
        }
    }
    return rep;
}

template <class T>
std::vector<double> saliency(const Model<T>& model, const TraceSet& ts, std::size_t batch) {
    if (ts.n_samples() != model.config.input_width)
        throw ShapeMismatch("trace width " + std::to_string(ts.n_samples()) + " does not match model input width " +
                            std::to_string(model.config.input_width));
    if (!ts.meta.labels) throw MissingMetadata("saliency needs labels");
    if (ts.n_traces() == 0) throw EmptyTraceSet("saliency of an empty trace set");
    batch = std::max<std::size_t>(batch, 1);

    std::vector<double> sal(ts.n_samples(), 0.0);
    std::vector<std::size_t> rows;
    std::vector<std::uint8_t> labels;
    for (std::size_t first = 0; first < ts.n_traces(); first += batch) {
        const std::size_t count = std::min(batch, ts.n_traces() - first);
        rows.resize(count);
        labels.resize(count);
        for (std::size_t r = 0; r < count; ++r) {
            rows[r] = first + r;
            labels[r] = (*ts.meta.labels)[first + r];
        }
        Tape<T> tape;
        PassOptions<T> opts;
        opts.training = false;
        opts.tape = &tape;
        const auto logits = forward_pass(model, batch_from<T>(ts, rows), opts);
        const auto loss = loss_ce(logits, labels);
        Tensor<T> dinput;
        backward(model, tape, loss.dlogits, &dinput);
        // loss_ce averages over the batch; undo that to get per-trace gradients.
        const double scale = static_cast<double>(count);
        for (std::size_t r = 0; r < count; ++r)
            for (std::size_t t = 0; t < sal.size(); ++t) sal[t] += std::abs(static_cast<double>(dinput[r * sal.size() + t]) * scale);
    }
    for (auto& v : sal) v /= static_cast<double>(ts.n_traces());
    return sal;
}

template std::vector<double> saliency<float>(const Model<float>&, const TraceSet&, std::size_t);
template std::vector<double> saliency<double>(const Model<double>&, const TraceSet&, std::size_t);

std::string format_number(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string format_csv(const NamedSeries& series, const std::optional<std::string>& index_name) {
    std::size_t rows = series.empty() ? 0 : series.front().second.size();
    for (const auto& [name, values] : series)
        if (values.size() != rows) throw ShapeMismatch("CSV series '" + name + "' has a different length");
    std::string out;
    bool first = true;
    if (index_name) {
        out += *index_name;
        first = false;
    }
    for (const auto& [name, values] : series) {
        if (!first) out += ',';
        out += name;
        first = false;
    }
    out += '\n';
    for (std::size_t r = 0; r < rows; ++r) {
        first = true;
        if (index_name) {
            out += std::to_string(r);
            first = false;
        }
        for (const auto& [name, values] : series) {
            if (!first) out += ',';
            out += format_number(values[r]);
            first = false;
        }
        out += '\n';
    }
    return out;
}

void export_csv(const NamedSeries& series, const std::filesystem::path& path, const std::optional<std::string>& index_name) {
    const std::string text = format_csv(series, index_name);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os << text;
    os.close();
    if (!os) throw IoError("failed writing " + path.string());
}

NamedSeries read_csv(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    std::string line;
    NamedSeries series;
    if (!std::getline(is, line)) return series;
    {
        std::stringstream ss(line);
        std::string name;
        while (std::getline(ss, name, ',')) series.emplace_back(name, std::vector<double>{});
    }
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::size_t col = 0;
        while (std::getline(ss, cell, ',')) {
            if (col >= series.size()) throw FormatError("CSV row has more cells than the header");
            double v = 0.0;
            const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
            if (res.ec != std::errc{}) {
                if (cell == "nan") v = std::nan("");
                else if (cell == "inf") v = INFINITY;
                else if (cell == "-inf") v = -INFINITY;
                else throw FormatError("non-numeric CSV cell '" + cell + "'");
            }
            series[col++].second.push_back(v);
        }
        if (col != series.size()) throw FormatError("CSV row has fewer cells than the header");
    }
    return series;
}

}  // namespace scaforge

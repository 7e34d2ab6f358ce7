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

#include "scaforge/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <type_traits>

#include "scaforge/errors.hpp"
#include "scaforge/rng.hpp"

#ifndef SCAFORGE_DEFAULT_PRESET_DIR
#define SCAFORGE_DEFAULT_PRESET_DIR "presets"
#endif

namespace scaforge {

// Accumulator at least as wide as double.
template <class T>
using Wide = std::conditional_t<(sizeof(T) > sizeof(double)), T, double>;

// ---------------------------------------------------------------------------
// Configuration

std::string to_string(LayerKind kind) {
    switch (kind) {
        case LayerKind::Dense: return "dense";
        case LayerKind::Conv1d: return "conv1d";
        case LayerKind::BatchNorm: return "batchnorm";
        case LayerKind::Relu: return "relu";
        case LayerKind::AvgPool: return "avgpool";
        case LayerKind::MaxPool: return "maxpool";
        case LayerKind::Flatten: return "flatten";
        case LayerKind::SoftmaxCeHead: return "softmax_ce_head";
    }
    return "?";
}

namespace {

LayerKind parse_layer_kind(const std::string& s) {
    for (auto k : {LayerKind::Dense, LayerKind::Conv1d, LayerKind::BatchNorm, LayerKind::Relu, LayerKind::AvgPool,
                   LayerKind::MaxPool, LayerKind::Flatten, LayerKind::SoftmaxCeHead}) {
        if (to_string(k) == s) return k;
    }
    throw InvalidConfig("unknown layer type '" + s + "'");
}

}  // namespace

LayerSpec LayerSpec::dense(std::size_t units) {
    LayerSpec s;
    s.kind = LayerKind::Dense;
    s.units = units;
    return s;
}

LayerSpec LayerSpec::conv1d(std::size_t filters, std::size_t kernel, std::size_t stride, Padding padding) {
    LayerSpec s;
    s.kind = LayerKind::Conv1d;
    s.filters = filters;
    s.kernel = kernel;
    s.stride = stride;
    s.padding = padding;
    return s;
}

LayerSpec LayerSpec::batchnorm(double momentum, double eps) {
    LayerSpec s;
    s.kind = LayerKind::BatchNorm;
    s.momentum = momentum;
    s.eps = eps;
    return s;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

LayerSpec LayerSpec::avgpool(std::size_t width) {
    LayerSpec s;
    s.kind = LayerKind::AvgPool;
    s.width = width;
    return s;
}

LayerSpec LayerSpec::maxpool(std::size_t width) {
    LayerSpec s;
    s.kind = LayerKind::MaxPool;
    s.width = width;
    return s;
}

LayerSpec LayerSpec::flatten() {
    LayerSpec s;
    s.kind = LayerKind::Flatten;
    return s;
}

LayerSpec LayerSpec::head(std::size_t classes) {
    LayerSpec s;
    s.kind = LayerKind::SoftmaxCeHead;
    s.units = classes;
    return s;
}

nlohmann::ordered_json to_json(const ModelConfig& cfg) {
    nlohmann::ordered_json j;
    j["name"] = cfg.name;
    j["input_width"] = cfg.input_width;
    auto& layers = j["layers"] = nlohmann::ordered_json::array();
    for (const auto& l : cfg.layers) {
        nlohmann::ordered_json e;
        e["type"] = to_string(l.kind);
        switch (l.kind) {
            case LayerKind::Dense: e["units"] = l.units; break;
            case LayerKind::Conv1d:
                e["filters"] = l.filters;
                e["kernel"] = l.kernel;
                e["stride"] = l.stride;
                e["padding"] = l.padding == Padding::Same ? "same" : "valid";
                break;
            case LayerKind::BatchNorm:
                e["momentum"] = l.momentum;
                e["eps"] = l.eps;
                break;
            case LayerKind::AvgPool:
            case LayerKind::MaxPool: e["width"] = l.width; break;
            case LayerKind::SoftmaxCeHead: e["classes"] = l.units; break;
            case LayerKind::Relu:
            case LayerKind::Flatten: break;
        }
        layers.push_back(std::move(e));
    }
    return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    try {
        ModelConfig cfg;
        cfg.name = j.value("name", std::string{});
        cfg.input_width = j.value("input_width", std::size_t{0});
        if (!j.contains("layers") || !j.at("layers").is_array()) throw InvalidConfig("model config needs a 'layers' array");
        for (const auto& e : j.at("layers")) {
            LayerSpec l;
            l.kind = parse_layer_kind(e.at("type").get<std::string>());
            switch (l.kind) {
                case LayerKind::Dense: l.units = e.at("units").get<std::size_t>(); break;
                case LayerKind::Conv1d: {
                    l.filters = e.at("filters").get<std::size_t>();
                    l.kernel = e.at("kernel").get<std::size_t>();
                    l.stride = e.value("stride", std::size_t{1});
                    const auto pad = e.value("padding", std::string{"valid"});
                    if (pad != "same" && pad != "valid") throw InvalidConfig("conv1d padding must be 'same' or 'valid'");
                    l.padding = pad == "same" ? Padding::Same : Padding::Valid;
                    break;
                }
                case LayerKind::BatchNorm:
                    l.momentum = e.value("momentum", 0.99);
                    l.eps = e.value("eps", 1e-5);
                    break;
                case LayerKind::AvgPool:
                case LayerKind::MaxPool: l.width = e.at("width").get<std::size_t>(); break;
                case LayerKind::SoftmaxCeHead: l.units = e.value("classes", kNumClasses); break;
                case LayerKind::Relu:
                case LayerKind::Flatten: break;
            }
            cfg.layers.push_back(l);
        }
        return cfg;
    } catch (const nlohmann::json::exception& e) {
        throw InvalidConfig(std::string("malformed model config: ") + e.what());
    }
}

std::size_t conv_valid_length(std::size_t length, std::size_t kernel, std::size_t stride) {
    if (kernel == 0 || stride == 0 || length < kernel) return 0;
    return (length - kernel) / stride + 1;
}

namespace {

std::size_t conv_out_length(const LayerSpec& l, std::size_t length) {
    if (l.padding == Padding::Valid) return conv_valid_length(length, l.kernel, l.stride);
    return (length + l.stride - 1) / l.stride;
}

// Zeros added on the left for 'same' padding; odd deficits go left.
std::size_t conv_pad_left(const LayerSpec& l, std::size_t length) {
    if (l.padding == Padding::Valid) return 0;
    const std::size_t out = conv_out_length(l, length);
    const std::size_t needed = (out - 1) * l.stride + l.kernel;
    const std::size_t total = needed > length ? needed - length : 0;
    return (total + 1) / 2;
}

[[noreturn]] void bad_layer(std::size_t idx, const LayerSpec& l, const std::string& why) {
    throw ShapeMismatch("layer " + std::to_string(idx) + " (" + to_string(l.kind) + "): " + why);
}

}  // namespace

std::vector<ActShape> infer_shapes(const ModelConfig& cfg) {
    if (cfg.input_width == 0) throw ShapeMismatch("model input width is zero");
    std::vector<ActShape> shapes{ActShape{1, cfg.input_width, false}};
    for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
        const auto& l = cfg.layers[i];
        const ActShape in = shapes.back();
        ActShape out = in;
        switch (l.kind) {
            case LayerKind::Dense:
            case LayerKind::SoftmaxCeHead:
                if (!in.flat && in.channels != 1) bad_layer(i, l, "needs a flat input; add a flatten layer");
                if (l.units == 0) bad_layer(i, l, "zero units");
                if (l.kind == LayerKind::SoftmaxCeHead && l.units != kNumClasses) bad_layer(i, l, "head must have 256 classes");
                out = ActShape{1, l.units, true};
                break;
            case LayerKind::Conv1d:
                if (in.flat) bad_layer(i, l, "needs a sequence input");
                if (l.filters == 0 || l.kernel == 0 || l.stride == 0) bad_layer(i, l, "filters, kernel and stride must be positive");
                out = ActShape{l.filters, conv_out_length(l, in.length), false};
                if (out.length == 0) bad_layer(i, l, "kernel longer than input");
                break;
            case LayerKind::BatchNorm:
                if (!(l.momentum >= 0.0 && l.momentum < 1.0) || !(l.eps > 0.0)) bad_layer(i, l, "bad momentum/eps");
                break;
            case LayerKind::Relu: break;
            case LayerKind::AvgPool:
            case LayerKind::MaxPool:
                if (in.flat) bad_layer(i, l, "needs a sequence input");
                if (l.width == 0 || in.length < l.width) bad_layer(i, l, "pool width exceeds input length");
                out = ActShape{in.channels, in.length / l.width, false};
                break;
            case LayerKind::Flatten: out = ActShape{1, in.numel(), true}; break;
        }
        const bool last = i + 1 == cfg.layers.size();
        if (l.kind == LayerKind::SoftmaxCeHead && !last) bad_layer(i, l, "head must be the last layer");
        shapes.push_back(out);
    }
    if (cfg.layers.empty() || cfg.layers.back().kind != LayerKind::SoftmaxCeHead)
        throw ShapeMismatch("layer " + std::to_string(cfg.layers.size()) + ": model must end with a softmax_ce_head");
    return shapes;
}

std::size_t parameter_count(const ModelConfig& cfg) {
    const auto shapes = infer_shapes(cfg);
    std::size_t n = 0;
    for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
        const auto& l = cfg.layers[i];
        const auto& in = shapes[i];
        switch (l.kind) {
            case LayerKind::Dense:
            case LayerKind::SoftmaxCeHead: n += l.units * in.numel() + l.units; break;
            case LayerKind::Conv1d: n += l.filters * in.channels * l.kernel + l.filters; break;
            case LayerKind::BatchNorm: n += 2 * (in.flat ? in.length : in.channels); break;
            default: break;
        }
    }
    return n;
}

std::filesystem::path preset_dir() {
    if (const char* env = std::getenv("SCAFORGE_PRESET_DIR"); env != nullptr && *env != '\0') return env;
    return SCAFORGE_DEFAULT_PRESET_DIR;
}

ModelConfig load_model_config(const std::filesystem::path& path, std::size_t input_width) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open model config " + path.string());
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw InvalidConfig("malformed model config " + path.string() + ": " + e.what());
    }
    ModelConfig cfg = model_config_from_json(j);
    if (input_width != 0) cfg.input_width = input_width;
    infer_shapes(cfg);
    return cfg;
}

ModelConfig load_preset(const std::string& name, std::size_t input_width) {
    const auto path = preset_dir() / (name + ".json");
    if (!std::filesystem::exists(path)) throw InvalidConfig("unknown model preset '" + name + "' (looked in " + path.string() + ")");
    ModelConfig cfg = load_model_config(path, input_width);
    if (cfg.name.empty()) cfg.name = name;
    return cfg;
}

std::string param_name(std::size_t layer, LayerKind kind, const std::string& what) {
    char prefix[16];
    std::snprintf(prefix, sizeof prefix, "%03zu_", layer);
    return prefix + to_string(kind) + "." + what;
}

// ---------------------------------------------------------------------------
// Construction

template <class T>
Model<T> build_model(const ModelConfig& cfg, std::uint64_t seed) {
    const auto shapes = infer_shapes(cfg);
    Model<T> m;
    m.config = cfg;
    for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
        const auto& l = cfg.layers[i];
        const auto& in = shapes[i];
        Rng rng(seed, "init", i);
        auto uniform = [&](Tensor<T>& t, double limit) {
            for (auto& v : t.data) v = static_cast<T>((2.0 * rng.uniform01() - 1.0) * limit);
        };
        switch (l.kind) {
            case LayerKind::Dense:
            case LayerKind::SoftmaxCeHead: {
                const double fan_in = static_cast<double>(in.numel());
                const double fan_out = static_cast<double>(l.units);
                Tensor<T> w({l.units, in.numel()});
                uniform(w, l.kind == LayerKind::Dense ? std::sqrt(6.0 / fan_in) : std::sqrt(6.0 / (fan_in + fan_out)));
                m.params.emplace(param_name(i, l.kind, "w"), std::move(w));
                m.params.emplace(param_name(i, l.kind, "b"), Tensor<T>({l.units}));
                break;
            }
            case LayerKind::Conv1d: {
                Tensor<T> w({l.filters, in.channels, l.kernel});
                uniform(w, std::sqrt(6.0 / static_cast<double>(in.channels * l.kernel)));
                m.params.emplace(param_name(i, l.kind, "w"), std::move(w));
                m.params.emplace(param_name(i, l.kind, "b"), Tensor<T>({l.filters}));
                break;
            }
            case LayerKind::BatchNorm: {
                const std::size_t f = in.flat ? in.length : in.channels;
                m.params.emplace(param_name(i, l.kind, "gamma"), Tensor<T>({f}, T{1}));
                m.params.emplace(param_name(i, l.kind, "beta"), Tensor<T>({f}));
                m.bn_state.emplace(param_name(i, l.kind, "running_mean"), Tensor<T>({f}));
                m.bn_state.emplace(param_name(i, l.kind, "running_var"), Tensor<T>({f}, T{1}));
                break;
            }
            default: break;
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Forward

namespace {

struct BnGeometry {
    std::size_t features;
    std::size_t inner;  // values per feature per sample
};

BnGeometry bn_geometry(const ActShape& s) {
    if (s.flat) return {s.length, 1};
    return {s.channels, s.length};
}

}  // namespace

template <class T>
Tensor<T> forward_pass(const Model<T>& model, const Tensor<T>& batch, const PassOptions<T>& opts) {
    const auto& cfg = model.config;
    const auto shapes = infer_shapes(cfg);
    if (batch.shape.size() != 2 || batch.shape[1] != cfg.input_width) {
        throw ShapeMismatch("batch width " + (batch.shape.size() == 2 ? std::to_string(batch.shape[1]) : std::string("?")) +
                            " does not match model input width " + std::to_string(cfg.input_width));
    }
    const std::size_t B = batch.shape[0];
    if (opts.tape) {
        opts.tape->training = opts.training;
        opts.tape->layers.assign(cfg.layers.size(), LayerCache<T>{});
    }

    Tensor<T> x = batch;
    for (std::size_t li = 0; li < cfg.layers.size(); ++li) {
        const auto& l = cfg.layers[li];
        const ActShape in = shapes[li];
        const ActShape out = shapes[li + 1];
        const std::size_t nin = in.numel();
        const std::size_t nout = out.numel();
        LayerCache<T>* cache = opts.tape ? &opts.tape->layers[li] : nullptr;
        Tensor<T> y({B, nout});

        switch (l.kind) {
            case LayerKind::Dense:
            case LayerKind::SoftmaxCeHead: {
                const auto& w = model.params.at(param_name(li, l.kind, "w"));
                const auto& b = model.params.at(param_name(li, l.kind, "b"));
                for (std::size_t s = 0; s < B; ++s) {
                    const T* xr = x.ptr() + s * nin;
                    T* yr = y.ptr() + s * nout;
                    for (std::size_t j = 0; j < nout; ++j) {
                        const T* wr = w.ptr() + j * nin;
                        T acc = b[j];
                        for (std::size_t i = 0; i < nin; ++i) acc += wr[i] * xr[i];
                        yr[j] = acc;
                    }
                }
                break;
            }
            case LayerKind::Conv1d: {
                const auto& w = model.params.at(param_name(li, l.kind, "w"));
                const auto& b = model.params.at(param_name(li, l.kind, "b"));
                const std::size_t C = in.channels, L = in.length, F = out.channels, Lo = out.length, K = l.kernel;
                const auto pad = static_cast<std::ptrdiff_t>(conv_pad_left(l, L));
                for (std::size_t s = 0; s < B; ++s) {
                    const T* xs = x.ptr() + s * nin;
                    T* ys = y.ptr() + s * nout;
                    for (std::size_t f = 0; f < F; ++f) {
                        for (std::size_t o = 0; o < Lo; ++o) {
                            T acc = b[f];
                            const auto base = static_cast<std::ptrdiff_t>(o * l.stride) - pad;
                            for (std::size_t c = 0; c < C; ++c) {
                                const T* wr = w.ptr() + (f * C + c) * K;
                                const T* xr = xs + c * L;
                                for (std::size_t k = 0; k < K; ++k) {
                                    const auto pos = base + static_cast<std::ptrdiff_t>(k);
                                    if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(L)) acc += wr[k] * xr[pos];
                                }
                            }
                            ys[f * Lo + o] = acc;
                        }
                    }
                }
                break;
            }
            case LayerKind::BatchNorm: {
                const auto& gamma = model.params.at(param_name(li, l.kind, "gamma"));
                const auto& beta = model.params.at(param_name(li, l.kind, "beta"));
                const auto geo = bn_geometry(in);
                const std::size_t F = geo.features, inner = geo.inner;
                std::vector<T> mean(F), inv_std(F);
                if (opts.training) {
                    using A = Wide<T>;
                    const A count = static_cast<A>(B * inner);
                    std::vector<A> var(F);
                    for (std::size_t f = 0; f < F; ++f) {
                        A sum = 0;
                        for (std::size_t s = 0; s < B; ++s)
                            for (std::size_t t = 0; t < inner; ++t) sum += x[s * nin + f * inner + t];
                        const A mu = sum / count;
                        A ss = 0;
                        for (std::size_t s = 0; s < B; ++s)
                            for (std::size_t t = 0; t < inner; ++t) {
                                const A d = x[s * nin + f * inner + t] - mu;
                                ss += d * d;
                            }
                        mean[f] = static_cast<T>(mu);
                        var[f] = ss / count;
                        inv_std[f] = static_cast<T>(A{1} / std::sqrt(var[f] + static_cast<A>(l.eps)));
                    }
                    if (opts.running_stats) {
                        auto& rm = opts.running_stats->at(param_name(li, l.kind, "running_mean"));
                        auto& rv = opts.running_stats->at(param_name(li, l.kind, "running_var"));
                        for (std::size_t f = 0; f < F; ++f) {
                            if (opts.cumulative_count > 0) {
                                const double k = static_cast<double>(opts.cumulative_count);
                                rm[f] = static_cast<T>(rm[f] + (mean[f] - rm[f]) / k);
                                rv[f] = static_cast<T>(rv[f] + (var[f] - rv[f]) / k);
                            } else {
                                rm[f] = static_cast<T>(l.momentum * rm[f] + (1.0 - l.momentum) * mean[f]);
                                rv[f] = static_cast<T>(l.momentum * rv[f] + (1.0 - l.momentum) * var[f]);
                            }
                        }
                    }
                } else {
                    const auto& rm = model.bn_state.at(param_name(li, l.kind, "running_mean"));
                    const auto& rv = model.bn_state.at(param_name(li, l.kind, "running_var"));
                    for (std::size_t f = 0; f < F; ++f) {
                        mean[f] = rm[f];
                        inv_std[f] = static_cast<T>(Wide<T>{1} / std::sqrt(static_cast<Wide<T>>(rv[f]) + static_cast<Wide<T>>(l.eps)));
                    }
                }
                Tensor<T> xhat({B, nin});
                for (std::size_t s = 0; s < B; ++s)
                    for (std::size_t f = 0; f < F; ++f)
                        for (std::size_t t = 0; t < inner; ++t) {
                            const std::size_t idx = s * nin + f * inner + t;
                            xhat[idx] = (x[idx] - mean[f]) * inv_std[f];
                            y[idx] = gamma[f] * xhat[idx] + beta[f];
                        }
                if (cache) {
                    cache->xhat = std::move(xhat);
                    cache->inv_std = std::move(inv_std);
                }
                break;
            }
            case LayerKind::Relu:
                for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T{0} ? x[i] : T{0};
                break;
            case LayerKind::AvgPool:
            case LayerKind::MaxPool: {
                const std::size_t C = in.channels, L = in.length, Lo = out.length, W = l.width;
                const bool is_max = l.kind == LayerKind::MaxPool;
                std::vector<std::uint32_t> argmax;
                if (is_max && cache) argmax.resize(B * nout);
                for (std::size_t s = 0; s < B; ++s)
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t o = 0; o < Lo; ++o) {
                            const std::size_t first = s * nin + c * L + o * W;
                            const std::size_t oi = s * nout + c * Lo + o;
                            if (is_max) {
                                std::size_t best = first;
                                for (std::size_t k = 1; k < W; ++k)
                                    if (x[first + k] > x[best]) best = first + k;
                                y[oi] = x[best];
                                if (cache) argmax[oi] = static_cast<std::uint32_t>(best - s * nin);
                            } else {
                                T acc{0};
                                for (std::size_t k = 0; k < W; ++k) acc += x[first + k];
                                y[oi] = acc / static_cast<T>(W);
                            }
                        }
                if (cache) cache->argmax = std::move(argmax);
                break;
            }
            case LayerKind::Flatten: y.data = x.data; break;
        }
        if (cache) cache->input = std::move(x);
        x = std::move(y);
    }
    return x;
}

template <class T>
Tensor<T> forward(Model<T>& model, const Tensor<T>& batch, Tape<T>* tape) {
    PassOptions<T> opts;
    opts.training = model.mode == Mode::Train;
    opts.running_stats = opts.training ? &model.bn_state : nullptr;
    opts.tape = tape;
    return forward_pass(model, batch, opts);
}

// ---------------------------------------------------------------------------
// Loss

template <class T>
LossResult<T> loss_ce(const Tensor<T>& logits, std::span<const std::uint8_t> labels) {
    if (logits.shape.size() != 2 || logits.shape[0] != labels.size() || logits.shape[0] == 0)
        throw ShapeMismatch("logits/labels batch size mismatch");
    const std::size_t B = logits.shape[0];
    const std::size_t K = logits.shape[1];
    LossResult<T> r;
    r.dlogits = Tensor<T>({B, K});
    std::vector<double> p(K);
    double total = 0.0;
    for (std::size_t s = 0; s < B; ++s) {
        if (labels[s] >= K) throw ShapeMismatch("label exceeds class count");
        const T* z = logits.ptr() + s * K;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, static_cast<double>(z[k]));
        double sum = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            p[k] = std::exp(static_cast<double>(z[k]) - mx);
            sum += p[k];
        }
        total += mx + std::log(sum) - static_cast<double>(z[labels[s]]);
        T* d = r.dlogits.ptr() + s * K;
        for (std::size_t k = 0; k < K; ++k) {
            const double target = k == labels[s] ? 1.0 : 0.0;
            d[k] = static_cast<T>((p[k] / sum - target) / static_cast<double>(B));
        }
    }
    r.loss = total / static_cast<double>(B);
    return r;
}

// ---------------------------------------------------------------------------
// Backward

template <class T>
Gradients<T> backward(const Model<T>& model, const Tape<T>& tape, const Tensor<T>& dlogits, Tensor<T>* dinput) {
    const auto& cfg = model.config;
    const auto shapes = infer_shapes(cfg);
    if (tape.layers.size() != cfg.layers.size()) throw ShapeMismatch("tape does not belong to this model");
    Gradients<T> grads;
    for (const auto& [name, p] : model.params) grads.emplace(name, Tensor<T>(p.shape));

    Tensor<T> dy = dlogits;
    const std::size_t B = dlogits.shape.empty() ? 0 : dlogits.shape[0];
    for (std::size_t li = cfg.layers.size(); li-- > 0;) {
        const auto& l = cfg.layers[li];
        const auto& cache = tape.layers[li];
        const Tensor<T>& x = cache.input;
        const ActShape in = shapes[li];
        const ActShape out = shapes[li + 1];
        const std::size_t nin = in.numel();
        const std::size_t nout = out.numel();
        if (dy.size() != B * nout || x.size() != B * nin) throw ShapeMismatch("gradient shape mismatch at layer " + std::to_string(li));
        const bool need_dx = li > 0 || dinput != nullptr;
        Tensor<T> dx;
        if (need_dx) dx = Tensor<T>({B, nin});

        switch (l.kind) {
            case LayerKind::Dense:
            case LayerKind::SoftmaxCeHead: {
                const auto& w = model.params.at(param_name(li, l.kind, "w"));
                auto& dw = grads.at(param_name(li, l.kind, "w"));
                auto& db = grads.at(param_name(li, l.kind, "b"));
                for (std::size_t s = 0; s < B; ++s) {
                    const T* xr = x.ptr() + s * nin;
                    const T* dyr = dy.ptr() + s * nout;
                    T* dxr = need_dx ? dx.ptr() + s * nin : nullptr;
                    for (std::size_t j = 0; j < nout; ++j) {
                        const T g = dyr[j];
                        db[j] += g;
                        T* dwr = dw.ptr() + j * nin;
                        for (std::size_t i = 0; i < nin; ++i) dwr[i] += g * xr[i];
                        if (dxr) {
                            const T* wr = w.ptr() + j * nin;
                            for (std::size_t i = 0; i < nin; ++i) dxr[i] += g * wr[i];
                        }
                    }
                }
                break;
            }
            case LayerKind::Conv1d: {
                const auto& w = model.params.at(param_name(li, l.kind, "w"));
                auto& dw = grads.at(param_name(li, l.kind, "w"));
                auto& db = grads.at(param_name(li, l.kind, "b"));
                const std::size_t C = in.channels, L = in.length, F = out.channels, Lo = out.length, K = l.kernel;
                const auto pad = static_cast<std::ptrdiff_t>(conv_pad_left(l, L));
                for (std::size_t s = 0; s < B; ++s) {
                    const T* xs = x.ptr() + s * nin;
                    const T* dys = dy.ptr() + s * nout;
                    T* dxs = need_dx ? dx.ptr() + s * nin : nullptr;
                    for (std::size_t f = 0; f < F; ++f)
                        for (std::size_t o = 0; o < Lo; ++o) {
                            const T g = dys[f * Lo + o];
                            db[f] += g;
                            const auto base = static_cast<std::ptrdiff_t>(o * l.stride) - pad;
                            for (std::size_t c = 0; c < C; ++c) {
                                const std::size_t wo = (f * C + c) * K;
                                for (std::size_t k = 0; k < K; ++k) {
                                    const auto pos = base + static_cast<std::ptrdiff_t>(k);
                                    if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(L)) continue;
                                    dw[wo + k] += g * xs[c * L + static_cast<std::size_t>(pos)];
                                    if (dxs) dxs[c * L + static_cast<std::size_t>(pos)] += g * w[wo + k];
                                }
                            }
                        }
                }
                break;
            }
            case LayerKind::BatchNorm: {
                const auto& gamma = model.params.at(param_name(li, l.kind, "gamma"));
                auto& dgamma = grads.at(param_name(li, l.kind, "gamma"));
                auto& dbeta = grads.at(param_name(li, l.kind, "beta"));
                const auto geo = bn_geometry(in);
                const std::size_t F = geo.features, inner = geo.inner;
                const auto& xhat = cache.xhat;
                const double m = static_cast<double>(B * inner);
                for (std::size_t f = 0; f < F; ++f) {
                    double sum_dy = 0.0, sum_dy_xhat = 0.0;
                    for (std::size_t s = 0; s < B; ++s)
                        for (std::size_t t = 0; t < inner; ++t) {
                            const std::size_t idx = s * nin + f * inner + t;
                            sum_dy += dy[idx];
                            sum_dy_xhat += static_cast<double>(dy[idx]) * xhat[idx];
                        }
                    dgamma[f] += static_cast<T>(sum_dy_xhat);
                    dbeta[f] += static_cast<T>(sum_dy);
                    if (!need_dx) continue;
                    const double g = gamma[f];
                    const double istd = cache.inv_std[f];
                    for (std::size_t s = 0; s < B; ++s)
                        for (std::size_t t = 0; t < inner; ++t) {
                            const std::size_t idx = s * nin + f * inner + t;
                            if (tape.training) {
                                // dxhat = dy * gamma; sums scale by gamma as well.
                                dx[idx] = static_cast<T>(g * istd / m *
                                                         (m * dy[idx] - sum_dy - static_cast<double>(xhat[idx]) * sum_dy_xhat));
                            } else {
                                dx[idx] = static_cast<T>(dy[idx] * g * istd);
                            }
                        }
                }
                break;
            }
            case LayerKind::Relu:
                if (need_dx)
                    for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > T{0} ? dy[i] : T{0};
                break;
            case LayerKind::AvgPool:
                if (need_dx) {
                    const std::size_t C = in.channels, L = in.length, Lo = out.length, W = l.width;
                    for (std::size_t s = 0; s < B; ++s)
                        for (std::size_t c = 0; c < C; ++c)
                            for (std::size_t o = 0; o < Lo; ++o) {
                                const T g = dy[s * nout + c * Lo + o] / static_cast<T>(W);
                                for (std::size_t k = 0; k < W; ++k) dx[s * nin + c * L + o * W + k] += g;
                            }
                }
                break;
            case LayerKind::MaxPool:
                if (need_dx) {
                    if (cache.argmax.size() != B * nout) throw ShapeMismatch("maxpool tape missing argmax");
                    for (std::size_t s = 0; s < B; ++s)
                        for (std::size_t o = 0; o < nout; ++o) dx[s * nin + cache.argmax[s * nout + o]] += dy[s * nout + o];
                }
                break;
            case LayerKind::Flatten:
                if (need_dx) dx.data = dy.data;
                break;
        }
        if (need_dx) dy = std::move(dx);
    }
    if (dinput) {
        dy.shape = {B, cfg.input_width};
        *dinput = std::move(dy);
    }
    return grads;
}

template <class T>
GradResult<T> compute_gradients(Model<T>& model, const Tensor<T>& batch, std::span<const std::uint8_t> labels) {
    Tape<T> tape;
    const Tensor<T> logits = forward(model, batch, &tape);
    auto loss = loss_ce(logits, labels);
    return {loss.loss, backward(model, tape, loss.dlogits)};
}

template <class T>
double evaluate_loss(const Model<T>& model, const Tensor<T>& batch, std::span<const std::uint8_t> labels) {
    PassOptions<T> opts;
    opts.training = model.mode == Mode::Train;
    return loss_ce(forward_pass(model, batch, opts), labels).loss;
}

// ---------------------------------------------------------------------------
// Gradient check

namespace {

// Reference loss in extended precision, so the finite differences are not
// swamped by double round-off when gradients are small.
long double loss_extended(const Model<long double>& model, const Tensor<long double>& batch,
                          std::span<const std::uint8_t> labels) {
    PassOptions<long double> opts;
    opts.training = model.mode == Mode::Train;
    const auto logits = forward_pass(model, batch, opts);
    const std::size_t B = logits.shape[0], K = logits.shape[1];
    long double total = 0;
    for (std::size_t s = 0; s < B; ++s) {
        const long double* z = logits.ptr() + s * K;
        const long double mx = *std::max_element(z, z + K);
        long double sum = 0;
        for (std::size_t k = 0; k < K; ++k) sum += std::exp(z[k] - mx);
        total += mx + std::log(sum) - z[labels[s]];
    }
    return total / static_cast<long double>(B);
}

}  // namespace

GradCheckResult grad_check(const Model<double>& model, const Tensor<double>& batch, std::span<const std::uint8_t> labels,
                           double eps, std::size_t coords_per_param, std::uint64_t seed, const GradientFn& analytic,
                           double floor) {
    Gradients<double> grads;
    if (analytic) {
        grads = analytic(model, batch, labels);
    } else {
        Tape<double> tape;
        PassOptions<double> opts;
        opts.training = model.mode == Mode::Train;
        opts.tape = &tape;
        const auto loss = loss_ce(forward_pass(model, batch, opts), labels);
        grads = backward(model, tape, loss.dlogits);
    }

    auto probe = model_cast<long double>(model);
    Tensor<long double> wide_batch(batch.shape);
    std::copy(batch.data.begin(), batch.data.end(), wide_batch.data.begin());
    GradCheckResult result;
    Rng rng(seed, "grad-check");
    for (const auto& [name, tensor] : model.params) {
        const auto git = grads.find(name);
        if (git == grads.end() || git->second.size() != tensor.size()) throw ShapeMismatch("gradient missing for " + name);
        std::vector<std::size_t> coords;
        if (tensor.size() <= coords_per_param) {
            for (std::size_t i = 0; i < tensor.size(); ++i) coords.push_back(i);
        } else {
            for (std::size_t c = 0; c < coords_per_param; ++c) coords.push_back(rng.below(tensor.size()));
        }
        auto& value = probe.params.at(name);
        for (std::size_t idx : coords) {
            const long double original = value[idx];
            auto loss_at = [&](long double delta) {
                value[idx] = original + delta;
                return loss_extended(probe, wide_batch, labels);
            };
            // Differences first: equal losses then cancel exactly.
            const long double h = eps;
            const long double d1 = loss_at(h) - loss_at(-h);
            const long double d2 = loss_at(2 * h) - loss_at(-2 * h);
            const auto numeric = static_cast<double>((8 * d1 - d2) / (12 * h));
            value[idx] = original;
            const double a = git->second[idx];
            const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
            ++result.checked;
            if (err > result.max_rel_error || std::isnan(err)) {
                result.max_rel_error = std::isnan(err) ? std::numeric_limits<double>::infinity() : err;
                result.worst_param = name;
                result.worst_index = idx;
            }
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Batching and inference

template <class T>
Tensor<T> batch_from(const TraceSet& ts, std::span<const std::size_t> rows) {
    const std::size_t s = ts.n_samples();
    Tensor<T> out({rows.size(), s});
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto src = ts.trace(rows[r]);
        std::copy(src.begin(), src.end(), out.data.begin() + static_cast<std::ptrdiff_t>(r * s));
    }
    return out;
}

template <class T>
std::vector<double> predict_proba(const Model<T>& model, const TraceSet& ts, std::size_t batch) {
    if (ts.n_samples() != model.config.input_width) throw ShapeMismatch("trace width does not match model input width");
    batch = std::max<std::size_t>(batch, 1);
    std::vector<double> probs(ts.n_traces() * kNumClasses);
    PassOptions<T> opts;
    opts.training = false;
    std::vector<std::size_t> rows;
    for (std::size_t first = 0; first < ts.n_traces(); first += batch) {
        const std::size_t count = std::min(batch, ts.n_traces() - first);
        rows.resize(count);
        for (std::size_t r = 0; r < count; ++r) rows[r] = first + r;
        const auto logits = forward_pass(model, batch_from<T>(ts, rows), opts);
        for (std::size_t r = 0; r < count; ++r) {
            const T* z = logits.ptr() + r * kNumClasses;
            double* p = probs.data() + (first + r) * kNumClasses;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < kNumClasses; ++k) mx = std::max(mx, static_cast<double>(z[k]));
            double sum = 0.0;
            for (std::size_t k = 0; k < kNumClasses; ++k) sum += p[k] = std::exp(static_cast<double>(z[k]) - mx);
            for (std::size_t k = 0; k < kNumClasses; ++k) p[k] /= sum;
        }
    }
    return probs;
}

#define SCAFORGE_INSTANTIATE(T)                                                                                     \
    template Model<T> build_model<T>(const ModelConfig&, std::uint64_t);                                            \
    template Tensor<T> forward_pass<T>(const Model<T>&, const Tensor<T>&, const PassOptions<T>&);                   \
    template Tensor<T> forward<T>(Model<T>&, const Tensor<T>&, Tape<T>*);                                           \
    template LossResult<T> loss_ce<T>(const Tensor<T>&, std::span<const std::uint8_t>);                             \
    template Gradients<T> backward<T>(const Model<T>&, const Tape<T>&, const Tensor<T>&, Tensor<T>*);               \
    template GradResult<T> compute_gradients<T>(Model<T>&, const Tensor<T>&, std::span<const std::uint8_t>);        \
    template double evaluate_loss<T>(const Model<T>&, const Tensor<T>&, std::span<const std::uint8_t>);             \
    template Tensor<T> batch_from<T>(const TraceSet&, std::span<const std::size_t>);                                \
    template std::vector<double> predict_proba<T>(const Model<T>&, const TraceSet&, std::size_t);

SCAFORGE_INSTANTIATE(float)
SCAFORGE_INSTANTIATE(double)

#undef SCAFORGE_INSTANTIATE

}  // namespace scaforge

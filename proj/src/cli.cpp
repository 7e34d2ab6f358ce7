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

#include "scaforge/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "scaforge/analysis.hpp"
#include "scaforge/errors.hpp"
#include "scaforge/rng.hpp"

namespace scaforge {

namespace {

using json = nlohmann::json;

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& section) {
    if (!j.is_object()) throw InvalidConfig("'" + section + "' must be an object");
    for (const auto& [key, value] : j.items())
        if (!allowed.contains(key)) throw InvalidConfig("unknown key '" + section + (section.empty() ? "" : ".") + key + "'");
}

template <class V>
void read_into(const json& j, const char* key, V& out) {
    if (j.contains(key) && !j.at(key).is_null()) out = j.at(key).get<V>();
}

template <class V>
void read_into(const json& j, const char* key, std::optional<V>& out) {
    if (j.contains(key) && !j.at(key).is_null()) out = j.at(key).get<V>();
}

SynthConfig synth_from_json(const json& j, const std::string& section, SynthConfig s) {
    check_keys(j, {"n_traces", "n_samples", "sigma", "leak_pos_masked", "leak_pos_mask", "max_desync", "fixed_key", "seed",
                   "unprotected"},
               section);
    read_into(j, "n_traces", s.n_traces);
    read_into(j, "n_samples", s.n_samples);
    read_into(j, "sigma", s.sigma);
    read_into(j, "leak_pos_masked", s.leak_pos_masked);
    read_into(j, "leak_pos_mask", s.leak_pos_mask);
    read_into(j, "max_desync", s.max_desync);
    read_into(j, "seed", s.seed);
    read_into(j, "unprotected", s.unprotected);
    if (j.contains("fixed_key") && !j.at("fixed_key").is_null()) s.fixed_key = parse_key_hex(j.at("fixed_key").get<std::string>());
    return s;
}

OptimizerConfig optimizer_from_json(const json& j) {
    check_keys(j, {"kind", "lr", "decay", "beta1", "beta2", "eps"}, "train.optimizer");
    const auto kind = j.value("kind", std::string{"adam"});
    const double lr = j.value("lr", 1e-3);
    OptimizerConfig o;
    if (kind == "adam") o = OptimizerConfig::adam(lr);
    else if (kind == "rmsprop") o = OptimizerConfig::rmsprop(lr);
    else throw InvalidConfig("train.optimizer.kind must be 'adam' or 'rmsprop'");
    read_into(j, "decay", o.decay);
    read_into(j, "beta1", o.beta1);
    read_into(j, "beta2", o.beta2);
    read_into(j, "eps", o.eps);
    o.validate();
    return o;
}

ScheduleConfig schedule_from_json(const json& j, double base_lr) {
    check_keys(j, {"kind", "lr_max", "div", "final_div", "pct_peak", "period_frac", "half_life_frac"}, "train.schedule");
    ScheduleConfig s;
    s.kind = parse_schedule_kind(j.value("kind", std::string{"constant"}));
    s.base_lr = base_lr;
    s.lr_max = base_lr;
    read_into(j, "lr_max", s.lr_max);
    read_into(j, "div", s.div);
    read_into(j, "final_div", s.final_div);
    read_into(j, "pct_peak", s.pct_peak);
    read_into(j, "period_frac", s.period_frac);
    read_into(j, "half_life_frac", s.half_life_frac);
    return s;
}

// ---------------------------------------------------------------------------
// Data pipeline

struct Prepared {
    TraceSet traces;
    std::optional<PreprocessStats> stats;
};

TraceSet load_or_generate(const std::optional<std::filesystem::path>& path, const std::optional<SynthConfig>& synth,
                          std::size_t target_byte) {
    TraceSet ts = path ? load_traceset(*path) : generate(*synth);
    if (!ts.meta.labels) ts = derive_labels(ts, target_byte);
    return ts;
}

TraceSet apply_window(const TraceSet& ts, const DataConfig& d) {
    return d.window ? window(ts, d.window->first, d.window->second) : ts;
}

Prepared prepare(const TraceSet& raw, const DataConfig& d, const std::optional<PreprocessStats>& stats) {
    Prepared p;
    p.traces = apply_window(raw, d);
    if (stats) {
        auto s = standardize(p.traces, stats->mode, stats, stats->epsilon);
        p.traces = std::move(s.traces);
        p.stats = std::move(s.stats);
    } else if (d.standardize) {
        auto s = standardize(p.traces, *d.standardize);
        p.traces = std::move(s.traces);
        p.stats = std::move(s.stats);
    }
    return p;
}

TraceSet profiling_raw(const ExperimentConfig& cfg) {
    return load_or_generate(cfg.data.path, cfg.data.synth, cfg.data.target_byte);
}

TraceSet attack_raw(const ExperimentConfig& cfg) {
    if (!cfg.attack.path && !cfg.attack.synth) throw InvalidConfig("no attack set configured (attack.path or attack.synth)");
    return load_or_generate(cfg.attack.path, cfg.attack.synth, cfg.data.target_byte);
}

json stats_to_json(const std::optional<PreprocessStats>& s) {
    if (!s) return nullptr;
    return json{{"mode", to_string(s->mode)}, {"mean", s->mean}, {"std", s->std}, {"epsilon", s->epsilon}};
}

std::optional<PreprocessStats> stats_from_json(const json& j) {
    if (j.is_null()) return std::nullopt;
    PreprocessStats s;
    s.mode = parse_standardize_mode(j.at("mode").get<std::string>());
    s.mean = j.at("mean").get<std::vector<double>>();
    s.std = j.at("std").get<std::vector<double>>();
    s.epsilon = j.at("epsilon").get<double>();
    return s;
}

ModelConfig resolve_model(const ExperimentConfig& cfg, std::size_t width) {
    if (cfg.model.contains("preset")) return load_preset(cfg.model.at("preset").get<std::string>(), width);
    json j = cfg.model;
    j["input_width"] = width;
    if (!j.contains("name")) j["name"] = "custom";
    ModelConfig m = model_config_from_json(j);
    infer_shapes(m);
    return m;
}

// ---------------------------------------------------------------------------
// Outputs

void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os << text;
    if (!os) throw IoError("failed writing " + path.string());
}

void write_ge(const GECurve& curve, const std::filesystem::path& out) {
    std::vector<double> n(curve.n_traces.begin(), curve.n_traces.end());
    export_csv({{"n_traces", n}, {"mean_rank", curve.mean_rank}}, out, std::nullopt);
    json summary;
    summary["repetitions"] = curve.repetitions;
    summary["seed"] = curve.seed;
    summary["max_traces"] = curve.n_traces.empty() ? 0 : curve.n_traces.back();
    summary["final_mean_rank"] = curve.mean_rank.empty() ? 0.0 : curve.mean_rank.back();
    summary["traces_to_zero"] = curve.traces_to_zero ? json(*curve.traces_to_zero) : json(nullptr);
    auto summary_path = out;
    summary_path.replace_extension(".summary.json");
    write_text(summary_path, summary.dump(2) + "\n");
}

std::size_t thread_cap() {
    const char* env = std::getenv("SCAFORGE_THREADS");
    if (env == nullptr || *env == '\0') return 0;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v <= 0) throw UsageError("SCAFORGE_THREADS must be a positive integer");
    return static_cast<std::size_t>(v);
}

// ---------------------------------------------------------------------------
// Subcommands

struct Args {
    std::string config;
    std::vector<std::string> sets;
    std::string out;
    std::string ckpt;
    std::string resume;
    std::string split = "profiling";
    std::string partition;
    std::string file;
    std::size_t workers = 0;
    std::size_t checkpoint_every = 0;
    std::size_t limit = 1000;
};

ExperimentConfig load_experiment(const Args& a) {
    json doc = json::object();
    if (!a.config.empty()) {
        std::ifstream is(a.config);
        if (!is) throw UsageError("cannot open config " + a.config);
        try {
            is >> doc;
        } catch (const json::exception& e) {
            throw InvalidConfig("malformed config " + a.config + ": " + e.what());
        }
    }
    apply_overrides(doc, a.sets);
    ExperimentConfig cfg = parse_experiment(doc);
    if (a.workers > 0) cfg.train.workers = a.workers;
    cfg.train.max_threads = thread_cap();
    return cfg;
}

int cmd_gen(const Args& a, std::ostream& out) {
    const auto cfg = load_experiment(a);
    std::optional<SynthConfig> synth;
    if (a.split == "profiling") synth = cfg.data.synth;
    else if (a.split == "attack") synth = cfg.attack.synth;
    else throw UsageError("--split must be 'profiling' or 'attack'");
    if (!synth) throw InvalidConfig("gen needs a synth section for the " + a.split + " set");
    const TraceSet ts = generate(*synth);
    save_traceset(ts, a.out);
    out << "wrote " << ts.n_traces() << " x " << ts.n_samples() << " traces to " << a.out << "\n";
    return 0;
}

int cmd_snr(const Args& a, std::ostream& out) {
    const auto cfg = load_experiment(a);
    const TraceSet ts = apply_window(profiling_raw(cfg), cfg.data);
    const std::string partition = a.partition.empty() ? cfg.snr_partition : a.partition;
    ClassFn cls;
    if (partition == "label") cls = partition_by_label(ts);
    else if (partition == "mask") cls = partition_by_mask(ts);
    else if (partition == "masked_label") cls = partition_by_masked_label(ts);
    else throw UsageError("unknown SNR partition '" + partition + "'");
    const auto rep = snr(ts, cls, partition);
    export_csv({{"snr", rep.values}}, a.out);
    const auto peak = std::max_element(rep.values.begin(), rep.values.end()) - rep.values.begin();
    out << "snr peak " << format_number(rep.values[static_cast<std::size_t>(peak)]) << " at sample " << peak << "\n";
    if (rep.degenerate_variance) out << "warning: zero within-class variance at some samples\n";
    return 0;
}

template <class T>
int cmd_lr_find(const ExperimentConfig& cfg, const Args& a, std::ostream& out) {
    const auto data = prepare(profiling_raw(cfg), cfg.data, std::nullopt);
    const auto mcfg = resolve_model(cfg, data.traces.n_samples());
    const auto model = build_model<T>(mcfg, derive_seed(cfg.seed, "init"));
    const auto curve = lr_find(model, data.traces, cfg.train.optimizer, cfg.train.batch_size, cfg.lr_find,
                               derive_seed(cfg.seed, "lr-find"));
    export_csv({{"lr", curve.lrs}, {"raw_loss", curve.raw_losses}, {"smoothed_loss", curve.smoothed}}, a.out, std::nullopt);
    json summary{{"suggestion", curve.suggestion},
                 {"truncated_at", curve.truncated_at ? json(*curve.truncated_at) : json(nullptr)}};
    out << summary.dump() << "\n";
    return 0;
}

template <class T>
int cmd_train(const ExperimentConfig& cfg, const Args& a, std::ostream& out) {
    const std::filesystem::path dir = a.out;
    std::filesystem::create_directories(dir);

    const auto data = prepare(profiling_raw(cfg), cfg.data, std::nullopt);
    const auto mcfg = resolve_model(cfg, data.traces.n_samples());

    std::optional<Checkpoint<T>> resume;
    if (!a.resume.empty()) resume = checkpoint_load<T>(a.resume, &mcfg);
    const Model<T> model = build_model<T>(mcfg, derive_seed(cfg.seed, "init"));

    std::optional<TraceSet> ge_set;
    FitOptions<T> opts;
    if (cfg.train.eval_ge_every) {
        ge_set = prepare(attack_raw(cfg), cfg.data, data.stats).traces;
        opts.ge_attack = &*ge_set;
        opts.ge = cfg.attack.ge;
    }
    opts.history_path = dir / "history.jsonl";
    opts.checkpoint_dir = dir;
    opts.checkpoint_every = a.checkpoint_every;
    opts.resume = resume ? &*resume : nullptr;

    const json extra{{"preprocess", stats_to_json(data.stats)},
                     {"target_byte", cfg.data.target_byte},
                     {"window", cfg.data.window ? json{cfg.data.window->first, cfg.data.window->second} : json(nullptr)}};

    FitResult<T> res = fit(model, data.traces, cfg.train, opts);

    res.final_state.extra = extra;
    checkpoint_save(res.final_state, dir / "ckpt_final");
    if (res.swa_model) {
        Checkpoint<T> swa;
        swa.model = *res.swa_model;
        swa.optimizer = cfg.train.optimizer;
        swa.epoch = res.final_state.epoch;
        swa.step = res.final_state.step;
        swa.extra = extra;
        checkpoint_save(swa, dir / "ckpt_swa");
    }

    std::vector<double> epoch, train_loss, ema_loss, val_loss, lr_last, ge, wall;
    for (const auto& r : res.history) {
        epoch.push_back(static_cast<double>(r.epoch));
        train_loss.push_back(r.train_loss);
        ema_loss.push_back(r.ema_loss);
        val_loss.push_back(r.val_loss.value_or(std::nan("")));
        lr_last.push_back(r.lr_last);
        ge.push_back(r.ge_at_checkpoint.value_or(std::nan("")));
        wall.push_back(r.wall_time_s);
    }
    export_csv({{"epoch", epoch},
                {"train_loss", train_loss},
                {"ema_loss", ema_loss},
                {"val_loss", val_loss},
                {"lr_last", lr_last},
                {"ge_at_checkpoint", ge}},
               dir / "metrics.csv", std::nullopt);
    export_csv({{"epoch", epoch}, {"wall_time_s", wall}}, dir / "timing.csv", std::nullopt);
    if (!res.history.empty()) {
        const auto& last = res.history.back();
        out << "epoch " << last.epoch << " train_loss " << format_number(last.train_loss) << " ema_loss "
            << format_number(last.ema_loss) << "\n";
    }
    return 0;
}

template <class T>
Prepared prepare_from_checkpoint(const Checkpoint<T>& ckpt, const TraceSet& raw, const ExperimentConfig& cfg) {
    const auto stats = ckpt.extra.contains("preprocess") ? stats_from_json(ckpt.extra.at("preprocess")) : std::nullopt;
    auto p = prepare(raw, cfg.data, stats);
    if (p.traces.n_samples() != ckpt.model.config.input_width)
        throw ShapeMismatch("prepared traces have " + std::to_string(p.traces.n_samples()) +
                            " samples but the checkpoint model expects " + std::to_string(ckpt.model.config.input_width));
    return p;
}

template <class T>
int cmd_attack(const ExperimentConfig& cfg, const Args& a, std::ostream& out) {
    auto ckpt = checkpoint_load<T>(a.ckpt);
    ckpt.model.mode = Mode::Infer;
    const auto data = prepare_from_checkpoint(ckpt, attack_raw(cfg), cfg);
    const auto curve = guessing_entropy(ckpt.model, data.traces, cfg.attack.ge);
    write_ge(curve, a.out);
    out << "final mean rank " << format_number(curve.mean_rank.back()) << ", traces to zero "
        << (curve.traces_to_zero ? std::to_string(*curve.traces_to_zero) : std::string("none")) << "\n";
    return 0;
}

template <class T>
int cmd_saliency(const ExperimentConfig& cfg, const Args& a, std::ostream& out) {
    auto ckpt = checkpoint_load<T>(a.ckpt);
    ckpt.model.mode = Mode::Infer;
    auto data = prepare_from_checkpoint(ckpt, profiling_raw(cfg), cfg);
    const std::size_t n = std::min(a.limit, data.traces.n_traces());
    std::vector<std::size_t> rows(n);
    for (std::size_t i = 0; i < n; ++i) rows[i] = i;
    const auto sal = saliency(ckpt.model, data.traces.select(rows));
    export_csv({{"saliency", sal}}, a.out);
    const auto peak = std::max_element(sal.begin(), sal.end()) - sal.begin();
    out << "saliency peak at sample " << peak << "\n";
    return 0;
}

int cmd_inspect(const Args& a, std::ostream& out) {
    const auto h = load_scat_header(a.file);
    json j;
    j["version"] = h.version;
    j["flags"] = h.flags;
    j["keys"] = (h.flags & kFlagKeys) != 0;
    j["plaintexts"] = (h.flags & kFlagPlaintexts) != 0;
    j["masks"] = (h.flags & kFlagMasks) != 0;
    j["labels"] = (h.flags & kFlagLabels) != 0;
    j["n_traces"] = h.n_traces;
    j["n_samples"] = h.n_samples;
    j["dtype"] = to_string(h.dtype);
    j["mask_len"] = h.mask_len;
    out << j.dump(2) << "\n";
    return 0;
}

template <template <class> class Fn>
int dispatch(Precision p, const ExperimentConfig& cfg, const Args& a, std::ostream& out) {
    return p == Precision::F64 ? Fn<double>{}(cfg, a, out) : Fn<float>{}(cfg, a, out);
}

template <class T>
struct LrFindFn {
    int operator()(const ExperimentConfig& c, const Args& a, std::ostream& o) { return cmd_lr_find<T>(c, a, o); }
};
template <class T>
struct TrainFn {
    int operator()(const ExperimentConfig& c, const Args& a, std::ostream& o) { return cmd_train<T>(c, a, o); }
};
template <class T>
struct AttackFn {
    int operator()(const ExperimentConfig& c, const Args& a, std::ostream& o) { return cmd_attack<T>(c, a, o); }
};
template <class T>
struct SaliencyFn {
    int operator()(const ExperimentConfig& c, const Args& a, std::ostream& o) { return cmd_saliency<T>(c, a, o); }
};

}  // namespace

// ---------------------------------------------------------------------------

Block16 parse_key_hex(const std::string& hex) {
    if (hex.size() != 32) throw InvalidConfig("key must be 32 hex digits");
    Block16 key{};
    for (std::size_t i = 0; i < 16; ++i) {
        unsigned v = 0;
        const auto res = std::from_chars(hex.data() + 2 * i, hex.data() + 2 * i + 2, v, 16);
        if (res.ec != std::errc{} || res.ptr != hex.data() + 2 * i + 2) throw InvalidConfig("key must be 32 hex digits");
        key[i] = static_cast<std::uint8_t>(v);
    }
    return key;
}

std::string key_hex(const Block16& key) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string s;
    for (auto b : key) {
        s += digits[b >> 4];
        s += digits[b & 15];
    }
    return s;
}

void apply_overrides(json& doc, const std::vector<std::string>& assignments) {
    std::vector<std::string> seen;
    for (const auto& a : assignments) {
        const auto eq = a.find('=');
        if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + a + "'");
        const std::string key = a.substr(0, eq);
        const std::string text = a.substr(eq + 1);
        for (const auto& k : seen) {
            const auto& [shorter, longer] = k.size() <= key.size() ? std::pair(k, key) : std::pair(key, k);
            if (shorter == longer || (longer.starts_with(shorter) && longer[shorter.size()] == '.'))
                throw UsageError("conflicting --set keys '" + k + "' and '" + key + "'");
        }
        seen.push_back(key);

        json value;
        try {
            value = json::parse(text);
        } catch (const json::exception&) {
            value = text;
        }
        if (!doc.is_object()) throw UsageError("config root must be an object");
        json* node = &doc;
        std::stringstream ss(key);
        std::string part;
        std::vector<std::string> parts;
        while (std::getline(ss, part, '.')) {
            if (part.empty()) throw UsageError("empty component in --set key '" + key + "'");
            parts.push_back(part);
        }
        for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
            json& next = (*node)[parts[i]];
            if (next.is_null()) next = json::object();
            if (!next.is_object()) throw UsageError("--set key '" + key + "' descends into a non-object");
            node = &next;
        }
        (*node)[parts.back()] = std::move(value);
    }
}

ExperimentConfig parse_experiment(const json& doc) {
    try {
        check_keys(doc, {"seed", "data", "model", "train", "attack", "lr_find", "snr"}, "");
        ExperimentConfig cfg;
        read_into(doc, "seed", cfg.seed);

        // data
        const json data = doc.value("data", json::object());
        check_keys(data, {"path", "synth", "target_byte", "window", "standardize"}, "data");
        read_into(data, "target_byte", cfg.data.target_byte);
        if (cfg.data.target_byte >= 16) throw InvalidConfig("data.target_byte must be in 0..15");
        const bool has_path = data.contains("path") && !data.at("path").is_null();
        const bool has_synth = data.contains("synth") && !data.at("synth").is_null();
        if (has_path == has_synth) throw InvalidConfig("exactly one of data.path and data.synth must be given");
        SynthConfig base;
        base.target_byte = cfg.data.target_byte;
        base.seed = derive_seed(cfg.seed, "data", 0);
        if (has_path) cfg.data.path = data.at("path").get<std::string>();
        else {
            cfg.data.synth = synth_from_json(data.at("synth"), "data.synth", base);
            cfg.data.synth->validate();
        }
        if (data.contains("window") && !data.at("window").is_null()) {
            const auto& w = data.at("window");
            if (!w.is_array() || w.size() != 2) throw InvalidConfig("data.window must be [start, length]");
            cfg.data.window = std::pair(w[0].get<std::size_t>(), w[1].get<std::size_t>());
        }
        if (data.contains("standardize") && !data.at("standardize").is_null()) {
            const auto mode = data.at("standardize").get<std::string>();
            if (mode != "none") cfg.data.standardize = parse_standardize_mode(mode);
        }

        // model
        cfg.model = doc.value("model", json::object());
        check_keys(cfg.model, {"preset", "layers", "name"}, "model");
        if (cfg.model.contains("preset") == cfg.model.contains("layers"))
            throw InvalidConfig("exactly one of model.preset and model.layers must be given");
        if (cfg.model.contains("preset")) {
            const auto name = cfg.model.at("preset").get<std::string>();
            if (!std::filesystem::exists(preset_dir() / (name + ".json"))) throw InvalidConfig("unknown model preset '" + name + "'");
        }

        // train
        const json train = doc.value("train", json::object());
        check_keys(train, {"epochs", "batch_size", "workers", "optimizer", "schedule", "augment_max_shift", "swa_start_epoch",
                           "val_fraction", "eval_ge_every", "precision", "ema_beta", "ref_batch"},
                   "train");
        auto& t = cfg.train;
        read_into(train, "epochs", t.epochs);
        read_into(train, "batch_size", t.batch_size);
        read_into(train, "workers", t.workers);
        read_into(train, "augment_max_shift", t.augment_max_shift);
        read_into(train, "swa_start_epoch", t.swa_start_epoch);
        read_into(train, "val_fraction", t.val_fraction);
        read_into(train, "eval_ge_every", t.eval_ge_every);
        read_into(train, "ema_beta", t.ema_beta);
        read_into(train, "ref_batch", cfg.ref_batch);
        if (train.contains("precision")) t.precision = parse_precision(train.at("precision").get<std::string>());
        t.optimizer = optimizer_from_json(train.value("optimizer", json::object()));
        t.schedule = schedule_from_json(train.value("schedule", json::object()), t.optimizer.base_lr);
        if (cfg.ref_batch) {
            if (*cfg.ref_batch == 0) throw InvalidConfig("train.ref_batch must be positive");
            t.optimizer.base_lr = scale_lr(t.optimizer.base_lr, t.batch_size, *cfg.ref_batch);
            t.schedule.base_lr = scale_lr(t.schedule.base_lr, t.batch_size, *cfg.ref_batch);
            t.schedule.lr_max = scale_lr(t.schedule.lr_max, t.batch_size, *cfg.ref_batch);
        }
        t.seed = derive_seed(cfg.seed, "train");
        t.validate();

        // attack
        const json attack = doc.value("attack", json::object());
        check_keys(attack, {"R", "max_traces", "step", "path", "synth"}, "attack");
        read_into(attack, "R", cfg.attack.ge.repetitions);
        read_into(attack, "max_traces", cfg.attack.ge.max_traces);
        read_into(attack, "step", cfg.attack.ge.step);
        cfg.attack.ge.seed = derive_seed(cfg.seed, "attack");
        cfg.attack.ge.target_byte = cfg.data.target_byte;
        if (attack.contains("path") && attack.contains("synth")) throw InvalidConfig("give at most one of attack.path and attack.synth");
        if (attack.contains("path")) cfg.attack.path = attack.at("path").get<std::string>();
        if (attack.contains("synth")) {
            SynthConfig s = cfg.data.synth.value_or(base);
            s.seed = derive_seed(cfg.seed, "data", 1);
            Rng key_rng(cfg.seed, "attack-key");
            Block16 key{};
            for (auto& b : key) b = key_rng.byte();
            s.fixed_key = key;
            cfg.attack.synth = synth_from_json(attack.at("synth"), "attack.synth", s);
            cfg.attack.synth->validate();
        }

        const json lr = doc.value("lr_find", json::object());
        check_keys(lr, {"lr_min", "lr_max", "n_steps", "ema_beta", "divergence_factor"}, "lr_find");
        read_into(lr, "lr_min", cfg.lr_find.lr_min);
        read_into(lr, "lr_max", cfg.lr_find.lr_max);
        read_into(lr, "n_steps", cfg.lr_find.n_steps);
        read_into(lr, "ema_beta", cfg.lr_find.ema_beta);
        read_into(lr, "divergence_factor", cfg.lr_find.divergence_factor);
        cfg.lr_find.validate();

        const json snr_section = doc.value("snr", json::object());
        check_keys(snr_section, {"partition"}, "snr");
        read_into(snr_section, "partition", cfg.snr_partition);
        return cfg;
    } catch (const json::exception& e) {
        throw InvalidConfig(std::string("bad config value: ") + e.what());
    }
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"scaforge: profiling side-channel workbench"};
    app.require_subcommand(1);
    Args a;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", a.config, "Experiment config (JSON)");
        sub->add_option("--set", a.sets, "Override a config value, e.g. train.epochs=5")->take_all();
    };
    auto* gen = app.add_subcommand("gen", "Generate a synthetic trace set as SCAT");
    common(gen);
    gen->add_option("--out", a.out, "Output SCAT file")->required();
    gen->add_option("--split", a.split, "profiling or attack");

    auto* snr_cmd = app.add_subcommand("snr", "Per-sample SNR of the profiling set");
    common(snr_cmd);
    snr_cmd->add_option("--out", a.out, "Output CSV")->required();
    snr_cmd->add_option("--partition", a.partition, "label, mask or masked_label");

    auto* lr = app.add_subcommand("lr-find", "Learning-rate range test");
    common(lr);
    lr->add_option("--out", a.out, "Output CSV")->required();

    auto* train = app.add_subcommand("train", "Train a model");
    common(train);
    train->add_option("--out", a.out, "Run directory")->required();
    train->add_option("--workers", a.workers, "Data-parallel workers");
    train->add_option("--checkpoint-every", a.checkpoint_every, "Save ckpt_epochN every N epochs");
    train->add_option("--resume", a.resume, "Continue from a checkpoint directory");

    auto* attack = app.add_subcommand("attack", "Guessing entropy of a trained model");
    common(attack);
    attack->add_option("--ckpt", a.ckpt, "Checkpoint directory")->required();
    attack->add_option("--out", a.out, "Output CSV")->required();

    auto* sal = app.add_subcommand("saliency", "Input-gradient saliency of a trained model");
    common(sal);
    sal->add_option("--ckpt", a.ckpt, "Checkpoint directory")->required();
    sal->add_option("--out", a.out, "Output CSV")->required();
    sal->add_option("--limit", a.limit, "Number of profiling traces");

    auto* inspect = app.add_subcommand("inspect", "Print a SCAT header");
    inspect->add_option("file", a.file, "SCAT file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }

    try {
        if (gen->parsed()) return cmd_gen(a, out);
        if (snr_cmd->parsed()) return cmd_snr(a, out);
        if (inspect->parsed()) return cmd_inspect(a, out);
        const auto cfg = load_experiment(a);
        if (lr->parsed()) return dispatch<LrFindFn>(cfg.train.precision, cfg, a, out);
        if (train->parsed()) return dispatch<TrainFn>(cfg.train.precision, cfg, a, out);
        if (attack->parsed()) return dispatch<AttackFn>(checkpoint_precision(a.ckpt), cfg, a, out);
        if (sal->parsed()) return dispatch<SaliencyFn>(checkpoint_precision(a.ckpt), cfg, a, out);
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const InvalidConfig& e) {
        err << "config error: " << e.what() << "\n";
        return 1;
    } catch (const Diverged& e) {
        err << "diverged: " << e.what() << " (" << e.history().size() << " epochs completed)\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

}  // namespace scaforge

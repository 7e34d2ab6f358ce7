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

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "scaforge/rng.hpp"
#include "scaforge/train.hpp"

namespace scaforge {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are written in native little-endian order");

namespace {

constexpr int kCheckpointVersion = 1;

nlohmann::ordered_json optimizer_json(const OptimizerConfig& o) {
    nlohmann::ordered_json j;
    j["kind"] = to_string(o.kind);
    j["base_lr"] = o.base_lr;
    j["decay"] = o.decay;
    j["beta1"] = o.beta1;
    j["beta2"] = o.beta2;
    j["eps"] = o.eps;
    return j;
}

OptimizerConfig optimizer_from_json(const nlohmann::json& j) {
    OptimizerConfig o;
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "adam") o.kind = OptimizerKind::Adam;
    else if (kind == "rmsprop") o.kind = OptimizerKind::RmsProp;
    else throw FormatError("unknown optimizer kind in checkpoint: " + kind);
    o.base_lr = j.at("base_lr").get<double>();
    o.decay = j.at("decay").get<double>();
    o.beta1 = j.at("beta1").get<double>();
    o.beta2 = j.at("beta2").get<double>();
    o.eps = j.at("eps").get<double>();
    return o;
}

template <class T>
void collect(std::map<std::string, const Tensor<T>*>& all, const std::string& prefix, const ParamMap<T>& m) {
    for (const auto& [name, t] : m) all.emplace(prefix + name, &t);
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw IoError("cannot open " + p.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + p.string() + " for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    os.close();
    if (!os) throw IoError("failed writing " + p.string());
}

}  // namespace

std::string config_hash(const ModelConfig& cfg) {
    nlohmann::ordered_json j = to_json(cfg);
    j.erase("name");
    std::ostringstream ss;
    ss << std::hex << std::setw(16) << std::setfill('0') << hash_name(j.dump());
    return ss.str();
}

nlohmann::json checkpoint_manifest(const std::filesystem::path& dir) {
    const auto text = read_file(dir / "manifest.json");
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed checkpoint manifest: " + std::string(e.what()));
    }
}

Precision checkpoint_precision(const std::filesystem::path& dir) {
    return parse_precision(checkpoint_manifest(dir).at("precision").get<std::string>());
}

template <class T>
void checkpoint_save(const Checkpoint<T>& ckpt, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);

    std::map<std::string, const Tensor<T>*> all;
    collect(all, "param/", ckpt.model.params);
    collect(all, "bn/", ckpt.model.bn_state);
    collect(all, "opt/first/", ckpt.opt_state.first);
    collect(all, "opt/second/", ckpt.opt_state.second);
    collect(all, "swa/", ckpt.swa_params);

    std::string blob;
    nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
    for (const auto& [name, t] : all) {
        nlohmann::ordered_json e;
        e["name"] = name;
        e["shape"] = t->shape;
        e["offset"] = blob.size();
        tensors.push_back(e);
        blob.append(reinterpret_cast<const char*>(t->ptr()), t->size() * sizeof(T));
    }

    nlohmann::ordered_json m;
    m["format"] = "scaforge-checkpoint";
    m["version"] = kCheckpointVersion;
    m["precision"] = to_string(sizeof(T) == 4 ? Precision::F32 : Precision::F64);
    m["config_hash"] = config_hash(ckpt.model.config);
    m["model"] = to_json(ckpt.model.config);
    m["epoch"] = ckpt.epoch;
    m["step"] = ckpt.step;
    m["optimizer"] = optimizer_json(ckpt.optimizer);
    m["optimizer_step"] = ckpt.opt_state.step;
    m["ema_avg"] = ckpt.ema_avg;
    m["ema_count"] = ckpt.ema_count;
    m["swa_models"] = ckpt.swa_models;
    m["extra"] = ckpt.extra;
    m["tensors"] = tensors;
    m["blob_bytes"] = blob.size();

    write_file(dir / "tensors.bin", blob);
    write_file(dir / "manifest.json", m.dump(2) + "\n");
}

template <class T>
Checkpoint<T> checkpoint_load(const std::filesystem::path& dir, const ModelConfig* expected) {
    const auto m = checkpoint_manifest(dir);
    try {
        if (m.at("format").get<std::string>() != "scaforge-checkpoint") throw FormatError("not a scaforge checkpoint");
        if (m.at("version").get<int>() != kCheckpointVersion) throw UnsupportedVersion("unsupported checkpoint version");
        const auto precision = parse_precision(m.at("precision").get<std::string>());
        if ((precision == Precision::F32) != (sizeof(T) == 4))
            throw ManifestMismatch("checkpoint precision " + to_string(precision) + " does not match the requested type");

        Checkpoint<T> c;
        c.model.config = model_config_from_json(m.at("model"));
        const auto stored_hash = m.at("config_hash").get<std::string>();
        if (stored_hash != config_hash(c.model.config)) throw FormatError("checkpoint config hash is inconsistent");
        if (expected && config_hash(*expected) != stored_hash)
            throw ManifestMismatch("checkpoint was saved for a different model config");

        c.epoch = m.at("epoch").get<std::size_t>();
        c.step = m.at("step").get<std::size_t>();
        c.optimizer = optimizer_from_json(m.at("optimizer"));
        c.opt_state.step = m.at("optimizer_step").get<std::uint64_t>();
        c.ema_avg = m.at("ema_avg").get<double>();
        c.ema_count = m.at("ema_count").get<std::size_t>();
        c.swa_models = m.at("swa_models").get<std::size_t>();
        c.extra = m.at("extra");

        const auto blob = read_file(dir / "tensors.bin");
        if (blob.size() != m.at("blob_bytes").get<std::size_t>()) throw TruncatedFile("checkpoint tensor blob has the wrong size");

        // Reference model supplies expected names and shapes for params/bn.
        const Model<T> ref = build_model<T>(c.model.config, 0);
        for (const auto& e : m.at("tensors")) {
            const auto name = e.at("name").get<std::string>();
            Tensor<T> t(e.at("shape").get<std::vector<std::size_t>>());
            const auto offset = e.at("offset").get<std::size_t>();
            const std::size_t bytes = t.size() * sizeof(T);
            if (offset > blob.size() || blob.size() - offset < bytes) throw TruncatedFile("tensor " + name + " exceeds the blob");
            std::memcpy(t.ptr(), blob.data() + offset, bytes);

            const auto slash = name.rfind('/');
            const auto prefix = name.substr(0, slash + 1);
            const auto key = name.substr(slash + 1);
            ParamMap<T>* target = nullptr;
            const ParamMap<T>* shapes = nullptr;
            if (prefix == "param/") target = &c.model.params, shapes = &ref.params;
            else if (prefix == "bn/") target = &c.model.bn_state, shapes = &ref.bn_state;
            else if (prefix == "opt/first/") target = &c.opt_state.first, shapes = &ref.params;
            else if (prefix == "opt/second/") target = &c.opt_state.second, shapes = &ref.params;
            else if (prefix == "swa/") target = &c.swa_params, shapes = &ref.params;
            else throw FormatError("unknown tensor group in checkpoint: " + name);
            const auto it = shapes->find(key);
            if (it == shapes->end() || it->second.shape != t.shape)
                throw ManifestMismatch("tensor " + name + " does not fit the model config");
            target->emplace(key, std::move(t));
        }
        if (c.model.params.size() != ref.params.size() || c.model.bn_state.size() != ref.bn_state.size())
            throw ManifestMismatch("checkpoint is missing model tensors");
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed checkpoint manifest: " + std::string(e.what()));
    }
}

template void checkpoint_save<float>(const Checkpoint<float>&, const std::filesystem::path&);
template void checkpoint_save<double>(const Checkpoint<double>&, const std::filesystem::path&);
template Checkpoint<float> checkpoint_load<float>(const std::filesystem::path&, const ModelConfig*);
template Checkpoint<double> checkpoint_load<double>(const std::filesystem::path&, const ModelConfig*);

}  // namespace scaforge

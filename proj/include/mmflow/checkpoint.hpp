// Copyright (C) 2026 The mmflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Checkpoint directory layout:
//   manifest.json  ordered tensor table {name, shape, dtype} + run manifest
//   weights.bin    float32 little-endian tensors concatenated in table order
//   config.json    the RunConfig the weights were trained under

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmflow/blob.hpp"
#include "mmflow/config.hpp"
#include "mmflow/dit.hpp"

namespace mmflow {

struct AdapterInfo {
    std::string domain;
    int rank = 0;
    bool shared = false;
};

/// Provenance of one output directory.
struct RunManifest {
    std::string run_id;
    std::string config_hash;
    std::string phase;         // "A" (backbone) or "B" (adapters)
    std::string content_hash;  // hash of weights.bin
    std::string base_hash;     // phase B: content hash of the backbone it was tuned from
    int start_step = 0;
    int end_step = 0;
    nlohmann::json metrics = nlohmann::json::object();
    std::optional<AdapterInfo> adapters;
};

inline nlohmann::json to_json(const RunManifest& m) {
    nlohmann::json j{{"run_id", m.run_id},
                     {"config_hash", m.config_hash},
                     {"phase", m.phase},
                     {"content_hash", m.content_hash},
                     {"base_hash", m.base_hash},
                     {"start_step", m.start_step},
                     {"end_step", m.end_step},
                     {"metrics", m.metrics}};
    if (m.adapters) {
        j["adapters"] = {{"domain", m.adapters->domain}, {"rank", m.adapters->rank}, {"shared", m.adapters->shared}};
    } else {
        j["adapters"] = nullptr;
    }
    return j;
}

inline RunManifest manifest_from_json(const nlohmann::json& j) {
    RunManifest m;
    m.run_id = j.at("run_id").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.phase = j.at("phase").get<std::string>();
    m.content_hash = j.at("content_hash").get<std::string>();
    m.base_hash = j.value("base_hash", "");
    m.start_step = j.at("start_step").get<int>();
    m.end_step = j.at("end_step").get<int>();
    m.metrics = j.value("metrics", nlohmann::json::object());
    if (j.contains("adapters") && !j.at("adapters").is_null()) {
        const auto& a = j.at("adapters");
        m.adapters = AdapterInfo{a.at("domain").get<std::string>(), a.at("rank").get<int>(), a.at("shared").get<bool>()};
    }
    return m;
}

inline std::string content_hash(const std::string& bytes) { return hex64(fnv1a64(bytes)); }

inline std::string make_run_id(const RunConfig& cfg, const std::string& phase) {
    return phase + "-" + config_hash(cfg).substr(0, 8) + "-s" + std::to_string(cfg.seed);
}

/// Serializes all parameters of `model` (base, tags, adapters). Fills in the
/// manifest's hashes and adapter info and returns the final manifest.
template <class T>
RunManifest save_checkpoint(const std::filesystem::path& dir, DiTModel<T>& model, RunManifest manifest) {
    std::filesystem::create_directories(dir);
    nlohmann::json table = nlohmann::json::array();
    std::string weights;
    for (const Parameter<T>* p : model.all_parameters()) {
        table.push_back({{"name", p->name}, {"shape", p->value.shape()}, {"dtype", "f32"}});
        for (T v : p->value.values()) {
            le::put_f32(weights, static_cast<float>(v));
        }
    }
    manifest.config_hash = config_hash(model.config());
    manifest.content_hash = content_hash(weights);
    if (model.has_adapters()) {
        const auto& reg = model.adapters();
        manifest.adapters = AdapterInfo{reg.domain_name(), reg.rank(), reg.shared()};
    } else {
        manifest.adapters.reset();
    }
    nlohmann::json doc = to_json(manifest);
    doc["tensors"] = table;
    write_file(dir / "weights.bin", weights);
    write_file(dir / "config.json", to_json(model.config()).dump(2) + "\n");
    write_file(dir / "manifest.json", doc.dump(2) + "\n");
    return manifest;
}

struct LoadedCheckpoint {
    RunConfig config;
    RunManifest manifest;
    std::unique_ptr<DiTModel<float>> model;
};

/// Rebuilds the model described by a checkpoint directory and loads its
/// weights. Every stored tensor must match a model parameter by name and shape
/// and every model parameter must be present.
inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
    LoadedCheckpoint out;
    out.config = load_config((dir / "config.json").string());
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(read_file(dir / "manifest.json"));
        out.manifest = manifest_from_json(doc);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::kIo, "bad manifest in " + dir.string() + ": " + e.what());
    }
    MMFLOW_CHECK(out.manifest.config_hash == config_hash(out.config), ErrorCode::kConfigMismatch,
                 "config.json does not match the manifest's config hash");
    const std::string weights = read_file(dir / "weights.bin");
    MMFLOW_CHECK(content_hash(weights) == out.manifest.content_hash, ErrorCode::kIo,
                 "weights.bin content hash mismatch");

    Rng init(0);
    out.model = std::make_unique<DiTModel<float>>(out.config, init);
    if (out.manifest.adapters) {
        const auto& a = *out.manifest.adapters;
        out.model->attach_adapters(DomainSpec::by_name(a.domain), a.rank, a.shared, init);
    }
    std::vector<Parameter<float>*> params = out.model->all_parameters();
    const auto& table = doc.at("tensors");
    MMFLOW_CHECK(table.size() == params.size(), ErrorCode::kConfigMismatch,
                 "checkpoint has " + std::to_string(table.size()) + " tensors, model expects " +
                     std::to_string(params.size()));
    const auto* p = reinterpret_cast<const unsigned char*>(weights.data());
    std::size_t off = 0;
    for (std::size_t i = 0; i < table.size(); ++i) {
        const std::string name = table[i].at("name").get<std::string>();
        const Shape shape = table[i].at("shape").get<Shape>();
        MMFLOW_CHECK(table[i].at("dtype").get<std::string>() == "f32", ErrorCode::kIo, "unsupported dtype");
        Parameter<float>* dst = params[i];
        MMFLOW_CHECK(dst->name == name && dst->value.shape() == shape, ErrorCode::kConfigMismatch,
                     "tensor " + name + " " + shape_str(shape) + " does not match model parameter " + dst->name + " " +
                         shape_str(dst->value.shape()));
        MMFLOW_CHECK(off + 4 * dst->value.size() <= weights.size(), ErrorCode::kIo, "weights.bin truncated");
        for (float& v : dst->value.values()) {
            v = le::get_f32(p + off);
            off += 4;
        }
    }
    MMFLOW_CHECK(off == weights.size(), ErrorCode::kIo, "trailing bytes in weights.bin");
    return out;
}

}  // namespace mmflow

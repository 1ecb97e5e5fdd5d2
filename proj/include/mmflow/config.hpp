// Copyright (C) 2026 The mmflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmflow/error.hpp"
#include "mmflow/types.hpp"

namespace mmflow {

struct PresetWeight {
    std::string name;
    double weight = 1.0;

    bool operator==(const PresetWeight&) const = default;
};

/// Everything that determines a run. Serialized as config.json.
struct RunConfig {
    std::string domain = "intrinsic-toy";

    // model
    int d_model = 64;
    int n_blocks = 4;
    int n_heads = 4;
    std::array<int, 3> patch{2, 2, 2};  // (p_t, p_h, p_w)
    int mlp_ratio = 4;
    int lora_rank = 4;
    double lora_scale = 1.0;

    // clips
    int frames = 8;
    int height = 16;
    int width = 16;

    // optimizer: fine-tune phase uses lr_init/lr_final, pretraining its own pair
    double lr_init = 1e-4;
    double lr_final = 1e-6;
    double pretrain_lr_init = 1e-3;
    double pretrain_lr_final = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 1e-2;
    double adam_eps = 1e-8;

    int pretrain_steps = 3000;
    int finetune_steps = 4000;
    int pretrain_batch = 4;
    int finetune_batch = 2;
    std::uint64_t seed = 0;

    // ablations
    bool no_gating = false;
    bool shared_lora = false;
    bool vanilla_attn = false;

    // stochastic condition masking
    std::string partition_mode = "iid_bernoulli";  // | "preset_mix"
    double partition_p = 0.5;
    std::vector<PresetWeight> preset_mix;
    double prompt_drop = 0.0;

    // data and sampling
    std::uint64_t data_seed = 1234;
    int n_train = 512;
    int n_test = 32;
    int sampler_steps = 32;

    bool operator==(const RunConfig&) const = default;

    DomainSpec domain_spec() const { return DomainSpec::by_name(domain); }

    int patch_dim() const { return patch[0] * patch[1] * patch[2] * 3; }
    int tokens_per_clip() const { return (frames / patch[0]) * (height / patch[1]) * (width / patch[2]); }
    int d_head() const { return d_model / n_heads; }

    void validate() const {
        auto fail = [](const std::string& m) { throw Error(ErrorCode::kInvalidConfig, m); };
        if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0) {
            fail("d_model must be a positive multiple of n_heads");
        }
        if (n_blocks < 1 || mlp_ratio < 1) {
            fail("n_blocks and mlp_ratio must be >= 1");
        }
        for (int p : patch) {
            if (p <= 0) {
                fail("patch sizes must be positive");
            }
        }
        if (frames <= 0 || height <= 0 || width <= 0 || frames % patch[0] || height % patch[1] || width % patch[2]) {
            fail("clip dims must be divisible by the patch sizes");
        }
        if (lora_rank < 1 || lora_rank >= d_model) {
            fail("lora_rank must satisfy 1 <= r < d_model");
        }
        if (pretrain_steps < 1 || finetune_steps < 1 || pretrain_batch < 1 || finetune_batch < 1) {
            fail("steps and batch sizes must be >= 1");
        }
        if (sampler_steps < 1) {
            throw Error(ErrorCode::kInvalidSteps, "sampler_steps must be >= 1");
        }
        if (partition_mode != "iid_bernoulli" && partition_mode != "preset_mix") {
            fail("partition_mode must be iid_bernoulli or preset_mix");
        }
        if (partition_mode == "preset_mix" && preset_mix.empty()) {
            fail("preset_mix mode needs at least one preset");
        }
        if (!(partition_p > 0.0 && partition_p <= 1.0) || prompt_drop < 0.0 || prompt_drop > 1.0) {
            fail("probabilities out of range");
        }
        if (n_train < 1 || n_test < 1) {
            fail("n_train and n_test must be >= 1");
        }
        (void)domain_spec();
    }
};

inline nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json mix = nlohmann::json::array();
    for (const auto& pw : c.preset_mix) {
        mix.push_back({{"name", pw.name}, {"weight", pw.weight}});
    }
    return {
        {"domain", c.domain},
        {"d_model", c.d_model},
        {"n_blocks", c.n_blocks},
        {"n_heads", c.n_heads},
        {"patch", c.patch},
        {"mlp_ratio", c.mlp_ratio},
        {"lora_rank", c.lora_rank},
        {"lora_scale", c.lora_scale},
        {"frames", c.frames},
        {"height", c.height},
        {"width", c.width},
        {"lr_init", c.lr_init},
        {"lr_final", c.lr_final},
        {"pretrain_lr_init", c.pretrain_lr_init},
        {"pretrain_lr_final", c.pretrain_lr_final},
        {"beta1", c.beta1},
        {"beta2", c.beta2},
        {"weight_decay", c.weight_decay},
        {"adam_eps", c.adam_eps},
        {"pretrain_steps", c.pretrain_steps},
        {"finetune_steps", c.finetune_steps},
        {"pretrain_batch", c.pretrain_batch},
        {"finetune_batch", c.finetune_batch},
        {"seed", c.seed},
        {"no_gating", c.no_gating},
        {"shared_lora", c.shared_lora},
        {"vanilla_attn", c.vanilla_attn},
        {"partition_mode", c.partition_mode},
        {"partition_p", c.partition_p},
        {"preset_mix", mix},
        {"prompt_drop", c.prompt_drop},
        {"data_seed", c.data_seed},
        {"n_train", c.n_train},
        {"n_test", c.n_test},
        {"sampler_steps", c.sampler_steps},
    };
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline RunConfig config_from_json(const nlohmann::json& j) {
    MMFLOW_CHECK(j.is_object(), ErrorCode::kInvalidConfig, "config must be a JSON object");
    const nlohmann::json defaults = to_json(RunConfig{});
    for (const auto& [key, _] : j.items()) {
        MMFLOW_CHECK(defaults.contains(key), ErrorCode::kInvalidConfig, "unknown config key '" + key + "'");
    }
    RunConfig c;
    try {
        auto get = [&j](const char* key, auto& field) {
            if (j.contains(key)) {
                j.at(key).get_to(field);
            }
        };
        get("domain", c.domain);
        get("d_model", c.d_model);
        get("n_blocks", c.n_blocks);
        get("n_heads", c.n_heads);
        get("patch", c.patch);
        get("mlp_ratio", c.mlp_ratio);
        get("lora_rank", c.lora_rank);
        get("lora_scale", c.lora_scale);
        get("frames", c.frames);
        get("height", c.height);
        get("width", c.width);
        get("lr_init", c.lr_init);
        get("lr_final", c.lr_final);
        get("pretrain_lr_init", c.pretrain_lr_init);
        get("pretrain_lr_final", c.pretrain_lr_final);
        get("beta1", c.beta1);
        get("beta2", c.beta2);
        get("weight_decay", c.weight_decay);
        get("adam_eps", c.adam_eps);
        get("pretrain_steps", c.pretrain_steps);
        get("finetune_steps", c.finetune_steps);
        get("pretrain_batch", c.pretrain_batch);
        get("finetune_batch", c.finetune_batch);
        get("seed", c.seed);
        get("no_gating", c.no_gating);
        get("shared_lora", c.shared_lora);
        get("vanilla_attn", c.vanilla_attn);
        get("partition_mode", c.partition_mode);
        get("partition_p", c.partition_p);
        get("prompt_drop", c.prompt_drop);
        get("data_seed", c.data_seed);
        get("n_train", c.n_train);
        get("n_test", c.n_test);
        get("sampler_steps", c.sampler_steps);
        if (j.contains("preset_mix")) {
            for (const auto& item : j.at("preset_mix")) {
                for (const auto& [key, _] : item.items()) {
                    MMFLOW_CHECK(key == "name" || key == "weight", ErrorCode::kInvalidConfig,
                                 "unknown preset_mix key '" + key + "'");
                }
                c.preset_mix.push_back({item.at("name").get<std::string>(), item.value("weight", 1.0)});
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::kInvalidConfig, e.what());
    }
    c.validate();
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    MMFLOW_CHECK(in.good(), ErrorCode::kIo, "cannot open config " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::kInvalidConfig, path + ": " + e.what());
    }
    return config_from_json(j);
}

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << v;
    return os.str();
}

inline std::string config_hash(const RunConfig& c) { return hex64(fnv1a64(to_json(c).dump())); }

}  // namespace mmflow

// Copyright (C) 2026 The mmflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "mmflow/types.hpp"

namespace mmflow {

struct TaskPreset {
    std::string name;
    Partition partition;
    bool prompt_required = false;
};

namespace detail {

struct PresetRow {
    std::string_view domain;
    std::string_view name;
    std::vector<int> targets;
    bool prompt_required;
};

inline const std::vector<PresetRow>& preset_table() {
    using namespace intrinsic;
    namespace a = alpha;
    static const std::vector<PresetRow> rows = {
        {"intrinsic-toy", "text-to-intrinsic", {kRgb, kAlbedo, kIrradiance, kNormal}, true},
        {"intrinsic-toy", "inverse-rendering", {kAlbedo, kIrradiance, kNormal}, false},
        {"intrinsic-toy", "forward-rendering", {kRgb}, false},
        {"intrinsic-toy", "normal-est", {kNormal}, false},
        {"intrinsic-toy", "albedo-est", {kAlbedo}, false},
        {"intrinsic-toy", "relight", {kRgb, kIrradiance}, true},
        {"intrinsic-toy", "retexture", {kRgb, kAlbedo}, true},
        {"intrinsic-toy", "material-edit", {kRgb}, false},
        {"alpha-toy", "text-to-rgba", {a::kBlend, a::kForeground, a::kAlpha, a::kBackground}, true},
        {"alpha-toy", "matting", {a::kForeground, a::kAlpha, a::kBackground}, false},
        {"alpha-toy", "inpaint", {a::kForeground, a::kBlend}, true},
        {"alpha-toy", "bg-replace", {a::kBackground, a::kBlend}, true},
        {"alpha-toy", "fg-replace", {a::kBlend, a::kForeground, a::kAlpha}, true},
    };
    return rows;
}

}  // namespace detail

/// Named partition recipes. Throws UNKNOWN_PRESET for names outside the
/// domain's table.
inline TaskPreset task_preset(std::string_view name, const DomainSpec& domain) {
    for (const auto& row : detail::preset_table()) {
        if (row.domain == domain.name && row.name == name) {
            return {std::string(name), Partition::from_targets(domain.size(), row.targets), row.prompt_required};
        }
    }
    throw Error(ErrorCode::kUnknownPreset, "'" + std::string(name) + "' for domain " + domain.name);
}

inline std::vector<std::string> preset_names(const DomainSpec& domain) {
    std::vector<std::string> out;
    for (const auto& row : detail::preset_table()) {
        if (row.domain == domain.name) {
            out.emplace_back(row.name);
        }
    }
    return out;
}

// ─── Prompt text form: "shape=disk,color=red,light=east,motion=left" | "null" ──

namespace detail {

template <std::size_t N>
int lookup(const std::array<std::string_view, N>& names, std::string_view v, std::string_view key) {
    for (std::size_t i = 0; i < N; ++i) {
        if (names[i] == v) {
            return static_cast<int>(i);
        }
    }
    throw Error(ErrorCode::kInvalidConfig, "bad prompt value '" + std::string(v) + "' for " + std::string(key));
}

}  // namespace detail

inline std::string_view scene_key(const DomainSpec& domain) {
    return domain.consistency_rule == ConsistencyRule::kRenderEq ? "light" : "bg";
}

inline const std::array<std::string_view, 4>& scene_names(const DomainSpec& domain) {
    return domain.consistency_rule == ConsistencyRule::kRenderEq ? kLightNames : kBackgroundNames;
}

/// Parses the CLI prompt form. Unspecified attributes keep their defaults.
inline PromptSpec parse_prompt(std::string_view text, const DomainSpec& domain) {
    if (text == "null" || text.empty()) {
        return PromptSpec::null();
    }
    PromptSpec p;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t end = text.find(',', pos);
        if (end == std::string_view::npos) {
            end = text.size();
        }
        const std::string_view item = text.substr(pos, end - pos);
        const std::size_t eq = item.find('=');
        MMFLOW_CHECK(eq != std::string_view::npos, ErrorCode::kInvalidConfig,
                     "prompt item '" + std::string(item) + "' is not key=value");
        const std::string_view key = item.substr(0, eq);
        const std::string_view val = item.substr(eq + 1);
        if (key == "shape") {
            p.shape = static_cast<ShapeKind>(detail::lookup(kShapeNames, val, key));
        } else if (key == "color") {
            p.color = static_cast<Palette>(detail::lookup(kColorNames, val, key));
        } else if (key == scene_key(domain)) {
            p.scene = detail::lookup(scene_names(domain), val, key);
        } else if (key == "motion") {
            p.motion = static_cast<Motion>(detail::lookup(kMotionNames, val, key));
        } else {
            throw Error(ErrorCode::kInvalidConfig, "unknown prompt key '" + std::string(key) + "'");
        }
        pos = end + 1;
    }
    return p;
}

inline std::string format_prompt(const PromptSpec& p, const DomainSpec& domain) {
    if (p.is_null) {
        return "null";
    }
    return "shape=" + std::string(kShapeNames[static_cast<int>(p.shape)]) +
           ",color=" + std::string(kColorNames[static_cast<int>(p.color)]) + "," + std::string(scene_key(domain)) +
           "=" + std::string(scene_names(domain)[static_cast<std::size_t>(p.scene)]) +
           ",motion=" + std::string(kMotionNames[static_cast<int>(p.motion)]);
}

}  // namespace mmflow

// Copyright (C) 2026 The mmflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdlib>
#include <array>
#include <cctype>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mmflow/error.hpp"
#include "mmflow/tensor.hpp"

namespace mmflow {

// ─── Modalities and domains ────────────────────────────────────────────────

struct ModalitySpec {
    int id = 0;
    std::string name;
    int channels = 3;

    bool operator==(const ModalitySpec&) const = default;
};

enum class ConsistencyRule { kRenderEq, kComposite };

struct DomainSpec {
    std::string name;
    std::vector<ModalitySpec> modalities;
    ConsistencyRule consistency_rule = ConsistencyRule::kRenderEq;

    int size() const noexcept { return static_cast<int>(modalities.size()); }

    bool operator==(const DomainSpec&) const = default;

    /// Index of a modality by case-insensitive name or decimal id.
    std::optional<int> find(std::string_view key) const {
        auto lower = [](std::string_view s) {
            std::string out(s);
            std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
            return out;
        };
        const std::string k = lower(key);
        for (const auto& m : modalities) {
            if (lower(m.name) == k || std::to_string(m.id) == k) {
                return m.id;
            }
        }
        return std::nullopt;
    }

    int index_of(std::string_view key) const {
        auto id = find(key);
        MMFLOW_CHECK(id.has_value(), ErrorCode::kUnknownId, "no modality '" + std::string(key) + "' in " + name);
        return *id;
    }

    /// Leading `n` modalities of this domain; used by tiny diagnostic configs.
    DomainSpec prefix(int n) const {
        DomainSpec out = *this;
        out.name = name + "[:" + std::to_string(n) + "]";
        out.modalities.resize(static_cast<std::size_t>(n));
        return out;
    }

    static DomainSpec intrinsic_toy() {
        return {"intrinsic-toy",
                {{0, "RGB", 3}, {1, "Albedo", 3}, {2, "Irradiance", 3}, {3, "Normal", 3}},
                ConsistencyRule::kRenderEq};
    }

    static DomainSpec alpha_toy() {
        return {"alpha-toy", {{0, "BL", 3}, {1, "FG", 3}, {2, "Alpha", 3}, {3, "BG", 3}}, ConsistencyRule::kComposite};
    }

    static DomainSpec by_name(std::string_view name) {
        if (const auto cut = name.find("[:"); cut != std::string_view::npos && name.back() == ']') {
            const std::string count(name.substr(cut + 2, name.size() - cut - 3));
            const DomainSpec base = by_name(name.substr(0, cut));
            const int n = std::atoi(count.c_str());
            MMFLOW_CHECK(n >= 1 && n <= base.size(), ErrorCode::kInvalidConfig, "bad domain prefix " + count);
            return base.prefix(n);
        }
        if (name == "intrinsic-toy") {
            return intrinsic_toy();
        }
        if (name == "alpha-toy") {
            return alpha_toy();
        }
        throw Error(ErrorCode::kInvalidConfig, "unknown domain '" + std::string(name) + "'");
    }
};

namespace intrinsic {
inline constexpr int kRgb = 0;
inline constexpr int kAlbedo = 1;
inline constexpr int kIrradiance = 2;
inline constexpr int kNormal = 3;
}  // namespace intrinsic

namespace alpha {
inline constexpr int kBlend = 0;
inline constexpr int kForeground = 1;
inline constexpr int kAlpha = 2;
inline constexpr int kBackground = 3;
}  // namespace alpha

// ─── Partitions ────────────────────────────────────────────────────────────

struct Partition {
    std::vector<int> targets;
    std::vector<int> conditions;

    bool operator==(const Partition&) const = default;

    /// Partition whose conditions are the complement of `targets` in 0..n-1.
    static Partition from_targets(int n, std::vector<int> targets) {
        std::sort(targets.begin(), targets.end());
        targets.erase(std::unique(targets.begin(), targets.end()), targets.end());
        Partition p;
        p.targets = targets;
        for (int k = 0; k < n; ++k) {
            if (!std::binary_search(targets.begin(), targets.end(), k)) {
                p.conditions.push_back(k);
            }
        }
        return p;
    }

    static Partition from_mask(int n, std::uint32_t target_mask) {
        std::vector<int> t;
        for (int k = 0; k < n; ++k) {
            if (target_mask & (1u << k)) {
                t.push_back(k);
            }
        }
        return from_targets(n, t);
    }

    bool is_target(int k) const { return std::find(targets.begin(), targets.end(), k) != targets.end(); }

    std::uint32_t target_mask() const {
        std::uint32_t m = 0;
        for (int k : targets) {
            m |= 1u << k;
        }
        return m;
    }
};

/// Throws with EMPTY_TARGETS / OVERLAP / UNKNOWN_ID / INCOMPLETE_COVER.
inline void validate_partition(const Partition& p, const DomainSpec& domain) {
    const int n = domain.size();
    auto known = [n](int k) { return k >= 0 && k < n; };
    for (int k : p.targets) {
        MMFLOW_CHECK(known(k), ErrorCode::kUnknownId, "target id " + std::to_string(k) + " not in " + domain.name);
    }
    for (int k : p.conditions) {
        MMFLOW_CHECK(known(k), ErrorCode::kUnknownId, "condition id " + std::to_string(k) + " not in " + domain.name);
    }
    MMFLOW_CHECK(!p.targets.empty(), ErrorCode::kEmptyTargets, "partition has no targets");
    std::vector<int> seen(static_cast<std::size_t>(n), 0);
    for (int k : p.targets) {
        seen[static_cast<std::size_t>(k)] |= 1;
    }
    for (int k : p.conditions) {
        MMFLOW_CHECK(!(seen[static_cast<std::size_t>(k)] & 1), ErrorCode::kOverlap,
                     "modality " + std::to_string(k) + " is both target and condition");
        seen[static_cast<std::size_t>(k)] |= 2;
    }
    for (int k = 0; k < n; ++k) {
        MMFLOW_CHECK(seen[static_cast<std::size_t>(k)] != 0, ErrorCode::kIncompleteCover,
                     "modality " + std::to_string(k) + " is neither target nor condition");
    }
}

/// Number of valid partitions over n modalities (non-empty target subsets).
constexpr std::uint64_t enumerate_valid_partitions(int n) { return (std::uint64_t{1} << n) - 1; }

// ─── Prompts ───────────────────────────────────────────────────────────────

enum class ShapeKind : int { kDisk, kSquare, kTriangle };
enum class Palette : int { kRed, kGreen, kBlue, kYellow, kMagenta, kCyan };
enum class Motion : int { kLeft, kRight, kUp, kDown };

inline constexpr std::array<std::string_view, 3> kShapeNames{"disk", "square", "triangle"};
inline constexpr std::array<std::string_view, 6> kColorNames{"red", "green", "blue", "yellow", "magenta", "cyan"};
inline constexpr std::array<std::string_view, 4> kLightNames{"north", "east", "south", "west"};
inline constexpr std::array<std::string_view, 4> kBackgroundNames{"flat", "gradient", "checker", "noise"};
inline constexpr std::array<std::string_view, 4> kMotionNames{"left", "right", "up", "down"};

/// Discrete stand-in for a text prompt. `scene` is the light direction in the
/// intrinsic domain and the background style in the alpha domain.
struct PromptSpec {
    ShapeKind shape = ShapeKind::kDisk;
    Palette color = Palette::kRed;
    int scene = 0;
    Motion motion = Motion::kLeft;
    bool is_null = false;

    static PromptSpec null() {
        PromptSpec p;
        p.is_null = true;
        return p;
    }

    bool operator==(const PromptSpec& o) const {
        if (is_null || o.is_null) {
            return is_null == o.is_null;
        }
        return shape == o.shape && color == o.color && scene == o.scene && motion == o.motion;
    }
};

inline constexpr int kSceneValues = 4;

// ─── Clip stacks ───────────────────────────────────────────────────────────

enum class ValueSpace { kData, kModel };

/// One (T, H, W, 3) tensor per modality of a domain.
struct ClipStack {
    DomainSpec domain;
    std::vector<Tensor<float>> clips;
    ValueSpace space = ValueSpace::kData;

    const Tensor<float>& operator[](int k) const { return clips.at(static_cast<std::size_t>(k)); }
    Tensor<float>& operator[](int k) { return clips.at(static_cast<std::size_t>(k)); }

    std::size_t frames() const { return clips.front().dim(0); }
    std::size_t height() const { return clips.front().dim(1); }
    std::size_t width() const { return clips.front().dim(2); }

    void check_shapes() const {
        MMFLOW_CHECK(static_cast<int>(clips.size()) == domain.size(), ErrorCode::kMissingModality,
                     "clip stack has " + std::to_string(clips.size()) + " clips for " + domain.name);
        for (const auto& c : clips) {
            MMFLOW_CHECK(c.rank() == 4 && c.dim(3) == 3, ErrorCode::kShapeMismatch, "clip must be (T,H,W,3)");
            MMFLOW_CHECK(c.shape() == clips.front().shape(), ErrorCode::kShapeMismatch,
                         "modalities disagree on (T,H,W)");
        }
    }
};

inline Tensor<float> data_to_model(const Tensor<float>& x) {
    Tensor<float> out = x;
    for (float& v : out.values()) {
        v = 2.0f * v - 1.0f;
    }
    return out;
}

/// Inverse of data_to_model, clamped to [0, 1].
inline Tensor<float> model_to_data(const Tensor<float>& z, bool clamp = true) {
    Tensor<float> out = z;
    for (float& v : out.values()) {
        v = (v + 1.0f) / 2.0f;
        if (clamp) {
            v = std::clamp(v, 0.0f, 1.0f);
        }
    }
    return out;
}

inline ClipStack to_model_space(const ClipStack& s) {
    if (s.space == ValueSpace::kModel) {
        return s;
    }
    ClipStack out{s.domain, {}, ValueSpace::kModel};
    for (const auto& c : s.clips) {
        out.clips.push_back(data_to_model(c));
    }
    return out;
}

inline ClipStack to_data_space(const ClipStack& s, bool clamp = true) {
    if (s.space == ValueSpace::kData) {
        return s;
    }
    ClipStack out{s.domain, {}, ValueSpace::kData};
    for (const auto& c : s.clips) {
        out.clips.push_back(model_to_data(c, clamp));
    }
    return out;
}

}  // namespace mmflow

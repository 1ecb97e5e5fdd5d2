// Copyright (C) 2026 The mmflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Procedural clip stacks with analytic ground truth. Each clip shows one
// moving shape; the modalities are tied together by construction:
//   intrinsic: RGB = Albedo * Irradiance, Irradiance = a + (1 - a) max(0, n.l)
//   alpha:     BL  = a FG + (1 - a) BG
// Everything is a pure function of the seed and the clip dimensions.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "mmflow/rng.hpp"
#include "mmflow/types.hpp"

namespace mmflow {

using Vec3 = std::array<double, 3>;

inline constexpr std::array<std::array<float, 3>, 6> kPaletteRgb{{
    {0.90f, 0.15f, 0.15f},  // red
    {0.20f, 0.80f, 0.25f},  // green
    {0.20f, 0.30f, 0.90f},  // blue
    {0.90f, 0.85f, 0.20f},  // yellow
    {0.85f, 0.20f, 0.80f},  // magenta
    {0.20f, 0.80f, 0.85f},  // cyan
}};

/// Ambient-floored Lambertian term a + (1 - a) max(0, n.l).
inline double lambert_irradiance(const Vec3& n, const Vec3& l, double ambient) {
    const double ndl = n[0] * l[0] + n[1] * l[1] + n[2] * l[2];
    return ambient + (1.0 - ambient) * std::max(0.0, ndl);
}

/// Light from one of the four image-plane directions at 45 degrees elevation.
/// Image coordinates: x to the right, y down, z towards the viewer.
inline Vec3 light_direction(int dir) {
    static constexpr std::array<std::array<double, 2>, 4> kPlanar{{{0, -1}, {1, 0}, {0, 1}, {-1, 0}}};
    const auto& p = kPlanar.at(static_cast<std::size_t>(dir));
    const double c = std::numbers::sqrt2 / 2.0;
    return {c * p[0], c * p[1], c};
}

/// Sampled attributes of one clip.
struct SceneParams {
    ShapeKind shape = ShapeKind::kDisk;
    Palette color = Palette::kRed;
    int scene = 0;  // light direction or background style
    Motion motion = Motion::kLeft;
    double inradius = 4.0;  // pixels
    double cx0 = 0.0, cy0 = 0.0;
    double vx = 0.0, vy = 0.0;  // pixels per frame
    double ambient = 0.2;
    float ground = 0.5f;
    std::array<float, 3> bg0{}, bg1{};
    double bg_angle = 0.0;
    std::uint64_t texture_seed = 0;

    PromptSpec prompt() const { return {shape, color, scene, motion, false}; }
};

/// Shape geometry relative to its center: the support value m(d) (the
/// distance-like quantity whose level set m = inradius is the outline) and
/// the unit direction of its gradient.
struct ShapeProfile {
    double m;
    double gx, gy;
};

inline ShapeProfile shape_profile(ShapeKind kind, double dx, double dy) {
    switch (kind) {
        case ShapeKind::kDisk: {
            const double r = std::hypot(dx, dy);
            if (r == 0.0) {
                return {0.0, 0.0, 0.0};
            }
            return {r, dx / r, dy / r};
        }
        case ShapeKind::kSquare: {
            if (std::abs(dx) >= std::abs(dy)) {
                return {std::abs(dx), dx >= 0 ? 1.0 : -1.0, 0.0};
            }
            return {std::abs(dy), 0.0, dy >= 0 ? 1.0 : -1.0};
        }
        case ShapeKind::kTriangle: {
            // Upright equilateral triangle; outward edge normals in image
            // coordinates (y down): bottom edge, upper-right, upper-left.
            static const std::array<std::array<double, 2>, 3> kNormals{{
                {0.0, 1.0},
                {std::sqrt(3.0) / 2.0, -0.5},
                {-std::sqrt(3.0) / 2.0, -0.5},
            }};
            ShapeProfile best{-1e300, 0.0, 0.0};
            for (const auto& nrm : kNormals) {
                const double v = nrm[0] * dx + nrm[1] * dy;
                if (v > best.m) {
                    best = {v, nrm[0], nrm[1]};
                }
            }
            return best;
        }
    }
    return {0.0, 0.0, 0.0};
}

/// Circumscribed radius relative to the inradius (motion margins).
inline double shape_extent(ShapeKind kind) {
    switch (kind) {
        case ShapeKind::kDisk:
            return 1.0;
        case ShapeKind::kSquare:
            return std::numbers::sqrt2;
        case ShapeKind::kTriangle:
            return 2.0;
    }
    return 2.0;
}

namespace detail {

inline constexpr std::uint64_t kIntrinsicSalt = 0x1A7C0DE5ull;
inline constexpr std::uint64_t kAlphaSalt = 0xA1FAB1E5ull;

inline double inradius_for(ShapeKind kind, double base) {
    switch (kind) {
        case ShapeKind::kDisk:
            return base;
        case ShapeKind::kSquare:
            return 0.85 * base;
        case ShapeKind::kTriangle:
            return 0.6 * base;
    }
    return base;
}

/// Start position keeping the moving shape inside the frame where possible.
inline void place(SceneParams& s, Rng& rng, std::size_t frames, std::size_t h, std::size_t w) {
    const double margin = s.inradius * shape_extent(s.shape) + 0.5;
    const double travel_x = s.vx * static_cast<double>(frames - 1);
    const double travel_y = s.vy * static_cast<double>(frames - 1);
    auto pick = [&rng](double lo, double hi) { return lo <= hi ? rng.uniform(lo, hi) : 0.5 * (lo + hi); };
    const double W = static_cast<double>(w), H = static_cast<double>(h);
    s.cx0 = pick(margin - std::min(0.0, travel_x), W - margin - std::max(0.0, travel_x));
    s.cy0 = pick(margin - std::min(0.0, travel_y), H - margin - std::max(0.0, travel_y));
}

inline SceneParams sample_common(Rng& rng, std::size_t frames, std::size_t h, std::size_t w) {
    SceneParams s;
    s.shape = static_cast<ShapeKind>(rng.below(kShapeNames.size()));
    s.color = static_cast<Palette>(rng.below(kColorNames.size()));
    s.scene = static_cast<int>(rng.below(kSceneValues));
    s.motion = static_cast<Motion>(rng.below(kMotionNames.size()));
    const double base = rng.uniform(0.2, 0.27) * static_cast<double>(std::min(h, w));
    s.inradius = inradius_for(s.shape, base);
    const double speed = static_cast<double>(w) / 24.0;
    switch (s.motion) {
        case Motion::kLeft:
            s.vx = -speed;
            break;
        case Motion::kRight:
            s.vx = speed;
            break;
        case Motion::kUp:
            s.vy = -speed;
            break;
        case Motion::kDown:
            s.vy = speed;
            break;
    }
    place(s, rng, frames, h, w);
    return s;
}

inline std::array<float, 3> random_color(Rng& rng, double lo, double hi) {
    return {static_cast<float>(rng.uniform(lo, hi)), static_cast<float>(rng.uniform(lo, hi)),
            static_cast<float>(rng.uniform(lo, hi))};
}

inline float lerp(float a, float b, float u) { return a + (b - a) * u; }

inline double smoothstep(double u) { return u * u * (3.0 - 2.0 * u); }

/// Smooth value noise in [0, 1]: bicubic-smoothed lattice of random values.
inline double value_noise(std::uint64_t seed, double x, double y, double cell) {
    const double gx = x / cell, gy = y / cell;
    const auto ix = static_cast<std::int64_t>(std::floor(gx)), iy = static_cast<std::int64_t>(std::floor(gy));
    const double fx = smoothstep(gx - static_cast<double>(ix)), fy = smoothstep(gy - static_cast<double>(iy));
    auto lattice = [seed](std::int64_t a, std::int64_t b) {
        const std::uint64_t h = mix64(seed, mix64(static_cast<std::uint64_t>(a), static_cast<std::uint64_t>(b)));
        return static_cast<double>(h >> 11) * 0x1.0p-53;
    };
    const double v00 = lattice(ix, iy), v10 = lattice(ix + 1, iy);
    const double v01 = lattice(ix, iy + 1), v11 = lattice(ix + 1, iy + 1);
    const double top = v00 + (v10 - v00) * fx, bot = v01 + (v11 - v01) * fx;
    return top + (bot - top) * fy;
}

}  // namespace detail

inline SceneParams sample_intrinsic_scene(std::uint64_t seed, std::size_t frames, std::size_t h, std::size_t w) {
    Rng rng(mix64(seed, detail::kIntrinsicSalt));
    SceneParams s = detail::sample_common(rng, frames, h, w);
    s.ambient = rng.uniform(0.1, 0.3);
    s.ground = static_cast<float>(rng.uniform(0.45, 0.65));
    return s;
}

inline SceneParams sample_alpha_scene(std::uint64_t seed, std::size_t frames, std::size_t h, std::size_t w) {
    Rng rng(mix64(seed, detail::kAlphaSalt));
    SceneParams s = detail::sample_common(rng, frames, h, w);
    s.bg0 = detail::random_color(rng, 0.05, 0.95);
    s.bg1 = detail::random_color(rng, 0.05, 0.95);
    s.bg_angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    s.texture_seed = rng.next_u64();
    return s;
}

inline SceneParams sample_scene(const DomainSpec& domain, std::uint64_t seed, std::size_t frames, std::size_t h,
                                std::size_t w) {
    return domain.consistency_rule == ConsistencyRule::kRenderEq ? sample_intrinsic_scene(seed, frames, h, w)
                                                                 : sample_alpha_scene(seed, frames, h, w);
}

struct RenderedClip {
    ClipStack stack;  // DATA space
    PromptSpec prompt;
    SceneParams scene;
};

/// A moving hemisphere-like bulge (height inradius * sqrt(1 - rho^2), rho the
/// shape's gauge) on a flat ground plane, lit by a directional light. The
/// bulge casts a hard shadow on the ground, which keeps only the ambient term.
inline RenderedClip render_intrinsic_clip(std::uint64_t seed, std::size_t frames = 8, std::size_t h = 16,
                                          std::size_t w = 16) {
    const SceneParams s = sample_intrinsic_scene(seed, frames, h, w);
    const Vec3 l = light_direction(s.scene);
    const Shape shape{frames, h, w, 3};
    Tensor<float> rgb(shape), albedo(shape), irr(shape), normal(shape);
    const auto& col = kPaletteRgb[static_cast<std::size_t>(s.color)];
    const double R = s.inradius;

    for (std::size_t t = 0; t < frames; ++t) {
        const double cx = s.cx0 + s.vx * static_cast<double>(t);
        const double cy = s.cy0 + s.vy * static_cast<double>(t);
        auto height_at = [&](double x, double y) {
            const ShapeProfile p = shape_profile(s.shape, x - cx, y - cy);
            const double rho = p.m / R;
            return rho < 1.0 ? R * std::sqrt(1.0 - rho * rho) : 0.0;
        };
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
                const ShapeProfile p = shape_profile(s.shape, px - cx, py - cy);
                const double rho = p.m / R;
                Vec3 n{0.0, 0.0, 1.0};
                std::array<float, 3> a{s.ground, s.ground, s.ground};
                bool shadowed = false;
                if (rho < 1.0) {
                    const double nz = std::sqrt(1.0 - rho * rho);
                    const double nx = rho * p.gx, ny = rho * p.gy;
                    const double len = std::sqrt(nx * nx + ny * ny + nz * nz);
                    n = {nx / len, ny / len, nz / len};
                    a = col;
                } else {
                    // March towards the light until the ray clears the bulge height.
                    const double step = 0.25;
                    for (double u = step; u * l[2] <= R; u += step) {
                        if (height_at(px + u * l[0], py + u * l[1]) > u * l[2]) {
                            shadowed = true;
                            break;
                        }
                    }
                }
                const float e = static_cast<float>(shadowed ? s.ambient : lambert_irradiance(n, l, s.ambient));
                const std::size_t o = ((t * h + y) * w + x) * 3;
                for (std::size_t c = 0; c < 3; ++c) {
                    albedo[o + c] = a[c];
                    irr[o + c] = e;
                    rgb[o + c] = a[c] * e;
                    normal[o + c] = static_cast<float>((n[c] + 1.0) / 2.0);
                }
            }
        }
    }
    RenderedClip out;
    out.stack = {DomainSpec::intrinsic_toy(), {std::move(rgb), std::move(albedo), std::move(irr), std::move(normal)},
                 ValueSpace::kData};
    out.prompt = s.prompt();
    out.scene = s;
    return out;
}

/// Background layer for style `s.scene` (flat, gradient, checker, noise).
inline float background_value(const SceneParams& s, double x, double y, std::size_t c, std::size_t w,
                              std::size_t h) {
    switch (s.scene) {
        case 0:
            return s.bg0[c];
        case 1: {
            const double ux = std::cos(s.bg_angle), uy = std::sin(s.bg_angle);
            const double half = 0.5 * (std::abs(ux) * static_cast<double>(w) + std::abs(uy) * static_cast<double>(h));
            const double proj = (x - 0.5 * static_cast<double>(w)) * ux + (y - 0.5 * static_cast<double>(h)) * uy;
            const double u = std::clamp(0.5 + 0.5 * proj / half, 0.0, 1.0);
            return detail::lerp(s.bg0[c], s.bg1[c], static_cast<float>(u));
        }
        case 2: {
            const auto cx = static_cast<long>(std::floor(x / 4.0)), cy = static_cast<long>(std::floor(y / 4.0));
            return ((cx + cy) & 1) ? s.bg1[c] : s.bg0[c];
        }
        default: {
            const double u = detail::value_noise(s.texture_seed, x, y, 4.0);
            return detail::lerp(s.bg0[c], s.bg1[c], static_cast<float>(u));
        }
    }
}

/// A moving flat-colored shape composited over a static background. Alpha
/// ramps linearly across 1.5 px centered on the outline.
inline RenderedClip render_alpha_clip(std::uint64_t seed, std::size_t frames = 8, std::size_t h = 16,
                                      std::size_t w = 16) {
    const SceneParams s = sample_alpha_scene(seed, frames, h, w);
    const Shape shape{frames, h, w, 3};
    Tensor<float> bl(shape), fg(shape), alpha(shape), bg(shape);
    const auto& col = kPaletteRgb[static_cast<std::size_t>(s.color)];
    constexpr double kFeather = 1.5;
    for (std::size_t t = 0; t < frames; ++t) {
        const double cx = s.cx0 + s.vx * static_cast<double>(t);
        const double cy = s.cy0 + s.vy * static_cast<double>(t);
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
                const double sd = shape_profile(s.shape, px - cx, py - cy).m - s.inradius;
                const auto a = static_cast<float>(std::clamp(0.5 - sd / kFeather, 0.0, 1.0));
                const std::size_t o = ((t * h + y) * w + x) * 3;
                for (std::size_t c = 0; c < 3; ++c) {
                    const float f = a > 0.0f ? col[c] : 0.0f;
                    const float b = background_value(s, px, py, c, w, h);
                    alpha[o + c] = a;
                    fg[o + c] = f;
                    bg[o + c] = b;
                    bl[o + c] = a * f + (1.0f - a) * b;
                }
            }
        }
    }
    RenderedClip out;
    out.stack = {DomainSpec::alpha_toy(), {std::move(bl), std::move(fg), std::move(alpha), std::move(bg)},
                 ValueSpace::kData};
    out.prompt = s.prompt();
    out.scene = s;
    return out;
}

inline RenderedClip render_clip(const DomainSpec& domain, std::uint64_t seed, std::size_t frames, std::size_t h,
                                std::size_t w) {
    return domain.consistency_rule == ConsistencyRule::kRenderEq ? render_intrinsic_clip(seed, frames, h, w)
                                                                 : render_alpha_clip(seed, frames, h, w);
}

struct Split {
    std::vector<std::uint64_t> train;
    std::vector<std::uint64_t> test;
};

/// Disjoint train/test clip seeds. Test seeds are chosen greedily from a
/// candidate stream so that every prompt attribute value is represented
/// (when n_test allows), then filled in stream order.
inline Split make_split(std::uint64_t seed, int n_train, int n_test, const DomainSpec& domain,
                        std::size_t frames = 8, std::size_t h = 16, std::size_t w = 16) {
    MMFLOW_CHECK(n_train >= 1 && n_test >= 1, ErrorCode::kInvalidConfig, "split sizes must be >= 1");
    constexpr std::uint64_t kTestStream = 0x7E57ull, kTrainStream = 0x7A1Aull;
    const std::size_t pool = static_cast<std::size_t>(n_test) * 8 + 64;
    std::vector<std::uint64_t> candidates(pool);
    std::vector<PromptSpec> prompts(pool);
    for (std::size_t i = 0; i < pool; ++i) {
        candidates[i] = mix64(mix64(seed, kTestStream), i);
        prompts[i] = sample_scene(domain, candidates[i], frames, h, w).prompt();
    }
    // Attribute values still missing from the chosen test set.
    std::set<std::pair<int, int>> missing;
    for (std::size_t v = 0; v < kShapeNames.size(); ++v) missing.insert({0, static_cast<int>(v)});
    for (std::size_t v = 0; v < kColorNames.size(); ++v) missing.insert({1, static_cast<int>(v)});
    for (int v = 0; v < kSceneValues; ++v) missing.insert({2, v});
    for (std::size_t v = 0; v < kMotionNames.size(); ++v) missing.insert({3, static_cast<int>(v)});
    auto attrs = [](const PromptSpec& p) {
        return std::array<std::pair<int, int>, 4>{{{0, static_cast<int>(p.shape)},
                                                   {1, static_cast<int>(p.color)},
                                                   {2, p.scene},
                                                   {3, static_cast<int>(p.motion)}}};
    };
    std::vector<bool> used(pool, false);
    Split split;
    while (!missing.empty() && split.test.size() < static_cast<std::size_t>(n_test)) {
        std::size_t best = pool;
        int best_gain = 0;
        for (std::size_t i = 0; i < pool; ++i) {
            if (used[i]) {
                continue;
            }
            int gain = 0;
            for (const auto& a : attrs(prompts[i])) {
                gain += static_cast<int>(missing.count(a));
            }
            if (gain > best_gain) {
                best_gain = gain;
                best = i;
            }
        }
        if (best == pool) {
            break;
        }
        used[best] = true;
        split.test.push_back(candidates[best]);
        for (const auto& a : attrs(prompts[best])) {
            missing.erase(a);
        }
    }
    for (std::size_t i = 0; i < pool && split.test.size() < static_cast<std::size_t>(n_test); ++i) {
        if (!used[i]) {
            used[i] = true;
            split.test.push_back(candidates[i]);
        }
    }
    const std::set<std::uint64_t> test_set(split.test.begin(), split.test.end());
    for (std::uint64_t i = 0; split.train.size() < static_cast<std::size_t>(n_train); ++i) {
        const std::uint64_t s = mix64(mix64(seed, kTrainStream), i);
        if (!test_set.count(s)) {
            split.train.push_back(s);
        }
    }
    return split;
}

/// Writes frame `t` of a DATA-space clip as binary PPM.
inline void write_ppm(const std::filesystem::path& path, const Tensor<float>& clip, std::size_t t) {
    const std::size_t h = clip.dim(1), w = clip.dim(2);
    std::ofstream f(path, std::ios::binary);
    MMFLOW_CHECK(f.good(), ErrorCode::kIo, "cannot write " + path.string());
    f << "P6\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> buf(h * w * 3);
    const float* src = clip.data() + t * h * w * 3;
    for (std::size_t i = 0; i < buf.size(); ++i) {
        buf[i] = static_cast<unsigned char>(std::lround(std::clamp(src[i], 0.0f, 1.0f) * 255.0f));
    }
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    MMFLOW_CHECK(f.good(), ErrorCode::kIo, "short write to " + path.string());
}

/// dir/<Modality>/frame_XX.ppm for every modality present in the stack.
inline void export_ppm_frames(const std::filesystem::path& dir, const ClipStack& stack) {
    const ClipStack data = to_data_space(stack);
    for (int k = 0; k < data.domain.size(); ++k) {
        const Tensor<float>& clip = data[k];
        if (clip.empty()) {
            continue;
        }
        const auto sub = dir / data.domain.modalities[static_cast<std::size_t>(k)].name;
        std::filesystem::create_directories(sub);
        for (std::size_t t = 0; t < clip.dim(0); ++t) {
            char name[32];
            std::snprintf(name, sizeof name, "frame_%02zu.ppm", t);
            write_ppm(sub / name, clip, t);
        }
    }
}

}  // namespace mmflow

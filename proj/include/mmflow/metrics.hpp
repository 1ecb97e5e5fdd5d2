// Copyright (C) 2026 The mmflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Evaluation metrics over DATA-space clips (T, H, W, 3). All of them are
// deterministic and accumulate in double.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "mmflow/types.hpp"

namespace mmflow {

inline constexpr double kPsnrCap = 99.0;

inline double mse(const Tensor<float>& a, const Tensor<float>& b) {
    require_same_shape(a, b, "mse");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.size());
}

/// 10 log10(peak^2 / MSE), capped at 99 dB once MSE < 1e-10.
inline double psnr(const Tensor<float>& pred, const Tensor<float>& gt, double peak = 1.0) {
    const double m = mse(pred, gt);
    if (m < 1e-10) {
        return kPsnrCap;
    }
    return 10.0 * std::log10(peak * peak / m);
}

namespace detail {

/// Channel-mean gray frames, [T][H*W].
inline std::vector<std::vector<double>> gray_frames(const Tensor<float>& clip) {
    const std::size_t T = clip.dim(0), H = clip.dim(1), W = clip.dim(2), C = clip.dim(3);
    std::vector<std::vector<double>> out(T, std::vector<double>(H * W));
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t p = 0; p < H * W; ++p) {
            double s = 0.0;
            for (std::size_t c = 0; c < C; ++c) {
                s += clip[(t * H * W + p) * C + c];
            }
            out[t][p] = s / static_cast<double>(C);
        }
    }
    return out;
}

inline void require_clip(const Tensor<float>& a) {
    MMFLOW_CHECK(a.rank() == 4, ErrorCode::kShapeMismatch, "expected a (T,H,W,C) clip");
}

}  // namespace detail

/// Mean SSIM over all valid 7x7 windows of every frame (uniform window,
/// K1 = 0.01, K2 = 0.03, peak 1, population statistics).
inline double ssim(const Tensor<float>& pred, const Tensor<float>& gt) {
    require_same_shape(pred, gt, "ssim");
    detail::require_clip(pred);
    const std::size_t T = pred.dim(0), H = pred.dim(1), W = pred.dim(2);
    constexpr std::size_t kWin = 7;
    MMFLOW_CHECK(H >= kWin && W >= kWin, ErrorCode::kTooSmall, "ssim needs spatial dims >= 7");
    constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
    const auto gp = detail::gray_frames(pred), gg = detail::gray_frames(gt);
    const double n = static_cast<double>(kWin * kWin);
    double total = 0.0;
    std::size_t windows = 0;
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t y = 0; y + kWin <= H; ++y) {
            for (std::size_t x = 0; x + kWin <= W; ++x) {
                // Two passes (means, then centered moments): identical inputs
                // give cxy == vx == vy exactly, and flat windows do not cancel.
                double sx = 0, sy = 0;
                for (std::size_t dy = 0; dy < kWin; ++dy) {
                    for (std::size_t dx = 0; dx < kWin; ++dx) {
                        const std::size_t p = (y + dy) * W + x + dx;
                        sx += gp[t][p];
                        sy += gg[t][p];
                    }
                }
                const double mx = sx / n, my = sy / n;
                double sxx = 0, syy = 0, sxy = 0;
                for (std::size_t dy = 0; dy < kWin; ++dy) {
                    for (std::size_t dx = 0; dx < kWin; ++dx) {
                        const std::size_t p = (y + dy) * W + x + dx;
                        const double a = gp[t][p] - mx, b = gg[t][p] - my;
                        sxx += a * a;
                        syy += b * b;
                        sxy += a * b;
                    }
                }
                const double vx = sxx / n, vy = syy / n, cxy = sxy / n;
                total += ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
                ++windows;
            }
        }
    }
    return total / static_cast<double>(windows);
}

struct AngularError {
    double mean_deg = 0.0;
    double frac_below_11_25 = 0.0;
    std::size_t pixels = 0;
};

/// Per-pixel angle between decoded normals (n = 2x - 1, normalized). `mask`
/// is (T, H, W) or empty for all pixels.
inline AngularError normal_angular(const Tensor<float>& pred, const Tensor<float>& gt,
                                   const std::vector<bool>& mask = {}) {
    require_same_shape(pred, gt, "normal_angular");
    detail::require_clip(pred);
    const std::size_t P = pred.size() / 3;
    MMFLOW_CHECK(mask.empty() || mask.size() == P, ErrorCode::kShapeMismatch, "normal mask size");
    AngularError r;
    double sum = 0.0;
    std::size_t below = 0;
    for (std::size_t p = 0; p < P; ++p) {
        if (!mask.empty() && !mask[p]) {
            continue;
        }
        double a[3], b[3], na = 0.0, nb = 0.0;
        for (std::size_t c = 0; c < 3; ++c) {
            a[c] = 2.0 * pred[p * 3 + c] - 1.0;
            b[c] = 2.0 * gt[p * 3 + c] - 1.0;
            na += a[c] * a[c];
            nb += b[c] * b[c];
        }
        na = std::sqrt(na);
        nb = std::sqrt(nb);
        MMFLOW_CHECK(na >= 1e-6 && nb >= 1e-6, ErrorCode::kZeroVector,
                     "decoded normal with zero length at pixel " + std::to_string(p));
        // atan2(|a x b|, a . b): exact zero for identical directions and well
        // conditioned near 0 and 180 degrees, unlike acos of the cosine.
        const double cx = a[1] * b[2] - a[2] * b[1];
        const double cy = a[2] * b[0] - a[0] * b[2];
        const double cz = a[0] * b[1] - a[1] * b[0];
        const double dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        const double deg = std::atan2(std::sqrt(cx * cx + cy * cy + cz * cz), dot) * 180.0 / std::numbers::pi;
        sum += deg;
        below += deg < 11.25 ? 1 : 0;
        ++r.pixels;
    }
    if (r.pixels > 0) {
        r.mean_deg = sum / static_cast<double>(r.pixels);
        r.frac_below_11_25 = static_cast<double>(below) / static_cast<double>(r.pixels);
    }
    return r;
}

struct MattingMetrics {
    double mad = 0.0;    // x 1e3
    double mse = 0.0;    // x 1e3
    double dtssd = 0.0;  // x 1e2
};

/// Alpha errors on channel 0. dtSSD uses forward temporal differences and
/// averages the per-pair RMS difference over the T - 1 frame pairs.
inline MattingMetrics matting_metrics(const Tensor<float>& pred_alpha, const Tensor<float>& gt_alpha) {
    require_same_shape(pred_alpha, gt_alpha, "matting_metrics");
    detail::require_clip(pred_alpha);
    const std::size_t T = pred_alpha.dim(0), HW = pred_alpha.dim(1) * pred_alpha.dim(2), C = pred_alpha.dim(3);
    MMFLOW_CHECK(T >= 2, ErrorCode::kTooFewFrames, "dtSSD needs at least 2 frames");
    auto at = [C, HW](const Tensor<float>& x, std::size_t t, std::size_t p) {
        return static_cast<double>(x[(t * HW + p) * C]);
    };
    MattingMetrics m;
    double abs_sum = 0.0, sq_sum = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t p = 0; p < HW; ++p) {
            const double d = at(pred_alpha, t, p) - at(gt_alpha, t, p);
            abs_sum += std::abs(d);
            sq_sum += d * d;
        }
    }
    const double count = static_cast<double>(T * HW);
    m.mad = abs_sum / count * 1e3;
    m.mse = sq_sum / count * 1e3;
    double dt = 0.0;
    for (std::size_t t = 0; t + 1 < T; ++t) {
        double s = 0.0;
        for (std::size_t p = 0; p < HW; ++p) {
            const double dp = at(pred_alpha, t + 1, p) - at(pred_alpha, t, p);
            const double dg = at(gt_alpha, t + 1, p) - at(gt_alpha, t, p);
            s += (dp - dg) * (dp - dg);
        }
        dt += std::sqrt(s / static_cast<double>(HW));
    }
    m.dtssd = dt / static_cast<double>(T - 1) * 1e2;
    return m;
}

/// 1 - mean over consecutive frame pairs of the mean absolute difference.
inline double temporal_flickering(const Tensor<float>& clip) {
    detail::require_clip(clip);
    const std::size_t T = clip.dim(0), F = clip.size() / T;
    MMFLOW_CHECK(T >= 2, ErrorCode::kTooFewFrames, "temporal_flickering needs at least 2 frames");
    double total = 0.0;
    for (std::size_t t = 0; t + 1 < T; ++t) {
        double s = 0.0;
        for (std::size_t i = 0; i < F; ++i) {
            s += std::abs(static_cast<double>(clip[(t + 1) * F + i]) - clip[t * F + i]);
        }
        total += s / static_cast<double>(F);
    }
    return 1.0 - total / static_cast<double>(T - 1);
}

/// Mean absolute violation of the domain's cross-modal rule on a DATA-space
/// stack. The reconstruction uses the same float expressions as the
/// generators, so ground truth scores exactly 0.
inline double consistency_residual(const ClipStack& stack) {
    MMFLOW_CHECK(stack.space == ValueSpace::kData, ErrorCode::kShapeMismatch, "residual needs a DATA-space stack");
    MMFLOW_CHECK(static_cast<int>(stack.clips.size()) == stack.domain.size(), ErrorCode::kMissingModality,
                 "residual needs every modality");
    for (const auto& c : stack.clips) {
        MMFLOW_CHECK(!c.empty(), ErrorCode::kMissingModality, "residual needs every modality");
    }
    stack.check_shapes();
    double acc = 0.0;
    const std::size_t n = stack.clips.front().size();
    if (stack.domain.consistency_rule == ConsistencyRule::kRenderEq) {
        const auto& rgb = stack[intrinsic::kRgb];
        const auto& alb = stack[intrinsic::kAlbedo];
        const auto& irr = stack[intrinsic::kIrradiance];
        for (std::size_t i = 0; i < n; ++i) {
            const float recon = alb[i] * irr[i];
            acc += std::abs(static_cast<double>(rgb[i] - recon));
        }
    } else {
        const auto& bl = stack[alpha::kBlend];
        const auto& fg = stack[alpha::kForeground];
        const auto& al = stack[alpha::kAlpha];
        const auto& bg = stack[alpha::kBackground];
        for (std::size_t i = 0; i < n; ++i) {
            const float a = al[i];
            const float recon = a * fg[i] + (1.0f - a) * bg[i];
            acc += std::abs(static_cast<double>(bl[i] - recon));
        }
    }
    return acc / static_cast<double>(n);
}

}  // namespace mmflow

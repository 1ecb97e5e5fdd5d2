// Copyright (C) 2026 The mmflow Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "mmflow/metrics.hpp"
#include "mmflow/synth.hpp"

using namespace mmflow;

namespace {

template <class F>
ErrorCode code_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "expected an mmflow::Error";
    return ErrorCode::kIo;
}

Tensor<float> filled(Shape s, float v) { return Tensor<float>(std::move(s), v); }

Tensor<float> uniform_clip(Shape s, Rng& rng) {
    Tensor<float> t(std::move(s));
    for (float& v : t.values()) v = static_cast<float>(rng.uniform());
    return t;
}

Tensor<float> encode_normals(const std::vector<Vec3>& ns, std::size_t H, std::size_t W) {
    Tensor<float> t({1, H, W, 3});
    for (std::size_t p = 0; p < ns.size(); ++p) {
        for (std::size_t c = 0; c < 3; ++c) t[p * 3 + c] = static_cast<float>((ns[p][c] + 1.0) / 2.0);
    }
    return t;
}

Vec3 random_unit(Rng& rng) {
    for (;;) {
        const Vec3 v{rng.normal(), rng.normal(), rng.normal()};
        const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        if (n > 1e-3) return {v[0] / n, v[1] / n, v[2] / n};
    }
}

}  // namespace

TEST(Psnr, Examples) {
    const auto a = filled({2, 8, 8, 3}, 0.3f);
    EXPECT_EQ(psnr(a, a), kPsnrCap);
    // Offset 0.1 everywhere: MSE 0.01 -> 20 dB.
    EXPECT_NEAR(psnr(filled({2, 8, 8, 3}, 0.5f), filled({2, 8, 8, 3}, 0.4f)), 20.0, 1e-4);
    EXPECT_NEAR(psnr(filled({1, 4, 4, 3}, 0.0f), filled({1, 4, 4, 3}, 1.0f)), 0.0, 1e-12);
    EXPECT_NEAR(mse(filled({1, 4, 4, 3}, 0.25f), filled({1, 4, 4, 3}, 0.75f)), 0.25, 1e-12);
    EXPECT_THROW(psnr(filled({1, 4, 4, 3}, 0.f), filled({1, 4, 5, 3}, 0.f)), Error);
}

TEST(Ssim, Examples) {
    Rng rng(1);
    const auto x = uniform_clip({2, 16, 16, 3}, rng);
    EXPECT_NEAR(ssim(x, x), 1.0, 1e-12);

    // Checkerboard against its inverse is anti-correlated.
    Tensor<float> chk({1, 16, 16, 3}), inv({1, 16, 16, 3});
    for (std::size_t p = 0; p < 256; ++p) {
        const float v = ((p / 16 + p % 16) & 1) ? 1.0f : 0.0f;
        for (std::size_t c = 0; c < 3; ++c) {
            chk[p * 3 + c] = v;
            inv[p * 3 + c] = 1.0f - v;
        }
    }
    EXPECT_LT(ssim(chk, inv), 0.0);

    // Two flat images: only the luminance term remains.
    const double a = 0.2, b = 0.7, C1 = 1e-4;
    EXPECT_NEAR(ssim(filled({1, 8, 8, 3}, 0.2f), filled({1, 8, 8, 3}, 0.7f)),
                (2 * a * b + C1) / (a * a + b * b + C1), 1e-6);
    EXPECT_EQ(code_of([] { ssim(filled({1, 6, 16, 3}, 0.f), filled({1, 6, 16, 3}, 0.f)); }), ErrorCode::kTooSmall);
}

TEST(Metrics, MonotoneInNoiseLevel) {
    Rng rng(2);
    for (int trial = 0; trial < 10; ++trial) {
        const auto gt = uniform_clip({2, 16, 16, 3}, rng);
        double prev_psnr = 1e9, prev_ssim = 2.0;
        for (double sd : {0.01, 0.05, 0.2}) {
            Tensor<float> noisy = gt;
            Rng nrng(static_cast<std::uint64_t>(trial));
            for (float& v : noisy.values()) v += static_cast<float>(sd * nrng.normal());
            const double p = psnr(noisy, gt), s = ssim(noisy, gt);
            EXPECT_LT(p, prev_psnr);
            EXPECT_LT(s, prev_ssim);
            prev_psnr = p;
            prev_ssim = s;
        }
    }
}

TEST(Angular, Examples) {
    std::vector<Vec3> up(16, Vec3{0, 0, 1}), side(16, Vec3{0, 1, 0});
    const auto a = encode_normals(up, 4, 4), b = encode_normals(side, 4, 4);
    const auto same = normal_angular(a, a);
    EXPECT_NEAR(same.mean_deg, 0.0, 1e-9);
    EXPECT_EQ(same.frac_below_11_25, 1.0);
    EXPECT_EQ(same.pixels, 16u);
    const auto orth = normal_angular(a, b);
    EXPECT_NEAR(orth.mean_deg, 90.0, 1e-9);
    EXPECT_EQ(orth.frac_below_11_25, 0.0);

    // Masking restricts the pixel set; non-normalized inputs are renormalized.
    std::vector<bool> mask(16, false);
    mask[3] = mask[7] = true;
    std::vector<Vec3> mixed = up;
    mixed[3] = {0, 1, 0};
    mixed[7] = {0, 0, 0.5};
    const auto m = normal_angular(encode_normals(mixed, 4, 4), a, mask);
    EXPECT_EQ(m.pixels, 2u);
    EXPECT_NEAR(m.mean_deg, 45.0, 1e-5);
    EXPECT_EQ(m.frac_below_11_25, 0.5);

    std::vector<Vec3> zero = up;
    zero[0] = {0, 0, 0};
    EXPECT_EQ(code_of([&] { normal_angular(encode_normals(zero, 4, 4), a); }), ErrorCode::kZeroVector);
}

TEST(Angular, IndependentRandomNormalsAverageNinetyDegrees) {
    Rng rng(3);
    const std::size_t H = 100, W = 1000;
    std::vector<Vec3> p(H * W), q(H * W);
    for (auto& v : p) v = random_unit(rng);
    for (auto& v : q) v = random_unit(rng);
    const auto r = normal_angular(encode_normals(p, H, W), encode_normals(q, H, W));
    EXPECT_NEAR(r.mean_deg, 90.0, 2.0);
    // P(angle < 11.25 deg) on the sphere is (1 - cos 11.25 deg) / 2.
    EXPECT_NEAR(r.frac_below_11_25, (1.0 - std::cos(11.25 * std::numbers::pi / 180.0)) / 2.0, 2e-3);
}

TEST(Matting, Examples) {
    Rng rng(4);
    const auto gt = uniform_clip({4, 8, 8, 3}, rng);
    const auto same = matting_metrics(gt, gt);
    EXPECT_EQ(same.mad, 0.0);
    EXPECT_EQ(same.mse, 0.0);
    EXPECT_EQ(same.dtssd, 0.0);

    // A constant bias shows up in MAD/MSE but not in temporal differences.
    Tensor<float> biased = filled({4, 8, 8, 3}, 0.51f);
    const auto b = matting_metrics(biased, filled({4, 8, 8, 3}, 0.5f));
    EXPECT_NEAR(b.mad, 10.0, 1e-3);
    EXPECT_NEAR(b.mse, 0.1, 1e-4);
    EXPECT_NEAR(b.dtssd, 0.0, 1e-9);

    // Hand example: T = 2, 4 pixels, one pixel wrong by 0.5 in the second frame.
    Tensor<float> g2({2, 2, 2, 1}), p2({2, 2, 2, 1});
    p2[4] = 0.5f;
    const auto h = matting_metrics(p2, g2);
    EXPECT_NEAR(h.mad, 0.5 / 8 * 1e3, 1e-9);
    EXPECT_NEAR(h.mse, 0.25 / 8 * 1e3, 1e-9);
    EXPECT_NEAR(h.dtssd, std::sqrt(0.25 / 4) * 1e2, 1e-9);

    EXPECT_EQ(code_of([] { matting_metrics(filled({1, 4, 4, 3}, 0.f), filled({1, 4, 4, 3}, 0.f)); }),
              ErrorCode::kTooFewFrames);
}

TEST(Flicker, Examples) {
    EXPECT_EQ(temporal_flickering(filled({5, 4, 4, 3}, 0.3f)), 1.0);
    Tensor<float> alt({4, 2, 2, 3});
    for (std::size_t t = 0; t < 4; ++t)
        for (std::size_t i = 0; i < 12; ++i) alt[t * 12 + i] = static_cast<float>(t % 2);
    EXPECT_EQ(temporal_flickering(alt), 0.0);
    Tensor<float> drift({6, 2, 2, 3});
    for (std::size_t t = 0; t < 6; ++t)
        for (std::size_t i = 0; i < 12; ++i) drift[t * 12 + i] = 0.2f + 0.01f * static_cast<float>(t);
    EXPECT_NEAR(temporal_flickering(drift), 0.99, 1e-6);
    EXPECT_EQ(code_of([] { temporal_flickering(filled({1, 4, 4, 3}, 0.f)); }), ErrorCode::kTooFewFrames);
}

TEST(Residual, GroundTruthIsConsistent) {
    for (int seed = 0; seed < 10; ++seed) {
        EXPECT_EQ(consistency_residual(render_intrinsic_clip(static_cast<std::uint64_t>(seed)).stack), 0.0);
        EXPECT_EQ(consistency_residual(render_alpha_clip(static_cast<std::uint64_t>(seed)).stack), 0.0);
    }
}

TEST(Residual, ZeroAlbedoGivesMeanRgb) {
    auto stack = render_intrinsic_clip(7).stack;
    const auto& rgb = stack.clips[intrinsic::kRgb];
    double mean = 0;
    for (float v : rgb.values()) mean += v;
    mean /= static_cast<double>(rgb.size());
    stack.clips[intrinsic::kAlbedo] = Tensor<float>(rgb.shape());
    EXPECT_NEAR(consistency_residual(stack), mean, 1e-9);
}

TEST(Residual, RandomStacksAreInconsistent) {
    Rng rng(5);
    for (const auto& d : {DomainSpec::intrinsic_toy(), DomainSpec::alpha_toy()}) {
        ClipStack s{d, {}, ValueSpace::kData};
        for (int k = 0; k < 4; ++k) s.clips.push_back(uniform_clip({2, 8, 8, 3}, rng));
        EXPECT_GT(consistency_residual(s), 0.05);
        s.clips[2] = Tensor<float>();
        EXPECT_EQ(code_of([&] { consistency_residual(s); }), ErrorCode::kMissingModality);
        s.clips.pop_back();
        EXPECT_EQ(code_of([&] { consistency_residual(s); }), ErrorCode::kMissingModality);
    }
}

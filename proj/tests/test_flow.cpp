// Copyright (C) 2026 The mmflow Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <map>

#include <gtest/gtest.h>

#include "mmflow/flow.hpp"
#include "mmflow/optim.hpp"
#include "mmflow/presets.hpp"
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

Tensor<float> randn(Shape s, Rng& rng) {
    Tensor<float> t(std::move(s));
    for (float& v : t.values()) v = static_cast<float>(rng.normal());
    return t;
}

const Shape kClip{2, 4, 4, 3};

}  // namespace

TEST(PartitionSampler, IidBernoulliMatchesClosedForm) {
    for (double p : {0.5, 0.3}) {
        PartitionPolicy pol;
        pol.p = p;
        Rng rng(1);
        const int draws = 40000;
        std::map<std::uint32_t, int> counts;
        for (int i = 0; i < draws; ++i) {
            const Partition part = sample_partition(rng, pol, 4);
            ASSERT_FALSE(part.targets.empty());
            std::uint32_t m = 0;
            for (int k : part.targets) m |= 1u << k;
            ++counts[m];
        }
        EXPECT_EQ(counts.count(0), 0u);
        const double z = 1.0 - std::pow(1.0 - p, 4);
        for (std::uint32_t m = 1; m < 16; ++m) {
            const int bits = __builtin_popcount(m);
            const double expect = std::pow(p, bits) * std::pow(1.0 - p, 4 - bits) / z;
            const double got = static_cast<double>(counts[m]) / draws;
            EXPECT_NEAR(got, expect, 0.1 * expect + 1e-3) << "p=" << p << " mask=" << m;
        }
    }
}

TEST(PartitionSampler, SingleModalityAlwaysTargetsIt) {
    PartitionPolicy pol;
    Rng rng(2);
    for (int i = 0; i < 100; ++i) {
        const Partition p = sample_partition(rng, pol, 1);
        EXPECT_EQ(p.targets, (std::vector<int>{0}));
        EXPECT_TRUE(p.conditions.empty());
    }
}

TEST(PartitionSampler, PresetMix) {
    const auto d = DomainSpec::alpha_toy();
    RunConfig cfg;
    cfg.domain = "alpha-toy";
    cfg.partition_mode = "preset_mix";
    cfg.preset_mix = {{"matting", 1.0}};
    Rng rng(3);
    const auto one = PartitionPolicy::from_config(cfg, d);
    for (int i = 0; i < 50; ++i) {
        EXPECT_EQ(sample_partition(rng, one, 4).targets, task_preset("matting", d).partition.targets);
    }
    cfg.preset_mix = {{"matting", 3.0}, {"inpaint", 1.0}};
    const auto two = PartitionPolicy::from_config(cfg, d);
    int matting = 0;
    for (int i = 0; i < 20000; ++i) {
        matting += sample_partition(rng, two, 4).targets == task_preset("matting", d).partition.targets ? 1 : 0;
    }
    EXPECT_NEAR(matting / 20000.0, 0.75, 0.02);
}

TEST(Timestep, UniformOnUnitInterval) {
    Rng rng(4);
    double sum = 0;
    for (int i = 0; i < 100000; ++i) {
        const double t = sample_timestep(rng);
        ASSERT_GE(t, 0.0);
        ASSERT_LT(t, 1.0);
        sum += t;
    }
    EXPECT_NEAR(sum / 100000, 0.5, 0.005);
}

TEST(Interpolate, Examples) {
    Rng rng(5);
    const auto x = randn(kClip, rng), eps = randn(kClip, rng);
    EXPECT_EQ(noise_interpolate(x, eps, 1.0), x);
    EXPECT_EQ(noise_interpolate(x, eps, 0.0), eps);
    const auto z = noise_interpolate(Tensor<float>(kClip, 1.0f), Tensor<float>(kClip, 0.0f), 0.25);
    for (float v : z.values()) EXPECT_EQ(v, 0.25f);
    const auto mid = noise_interpolate(x, eps, 0.5);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(mid[i], 0.5f * (x[i] + eps[i]), 1e-6f);
    EXPECT_EQ(code_of([&] { noise_interpolate(x, eps, 1.5); }), ErrorCode::kInvalidTimestep);
}

TEST(FlowLoss, Examples) {
    Rng rng(6);
    std::vector<Tensor<float>> x, eps, exact, zero;
    for (int k = 0; k < 4; ++k) {
        x.push_back(randn(kClip, rng));
        eps.push_back(randn(kClip, rng));
        Tensor<float> v(kClip);
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = x[k][i] - eps[k][i];
        exact.push_back(v);
        zero.push_back(Tensor<float>(kClip));
    }
    const Partition p = Partition::from_targets(4, {1, 2});
    EXPECT_EQ(fm_loss(exact, x, eps, p), 0.0);
    // Condition predictions are ignored.
    auto noisy = exact;
    noisy[0] = randn(kClip, rng);
    noisy[3] = Tensor<float>();
    EXPECT_EQ(fm_loss(noisy, x, eps, p), 0.0);

    // Constant velocity target c with a zero prediction gives c^2.
    std::vector<Tensor<float>> xc(4, Tensor<float>(kClip, 0.75f)), ec(4, Tensor<float>(kClip, 0.25f));
    EXPECT_NEAR(fm_loss(zero, xc, ec, p), 0.25, 1e-12);
    EXPECT_EQ(code_of([&] { fm_loss(zero, xc, ec, Partition{}); }), ErrorCode::kEmptyTargets);
}

TEST(FlowLoss, TapeGradientVanishesOnConditionRows) {
    RunConfig cfg;
    cfg.frames = 2;
    cfg.height = 4;
    cfg.width = 4;
    const PatchGrid g = PatchGrid::from(cfg);
    const std::size_t L = g.tokens(), P = g.patch_dim();
    Rng rng(7);
    std::vector<Tensor<double>> x;
    for (int k = 0; k < 4; ++k) x.push_back(randn(kClip, rng).cast<double>());
    const auto s = make_flow_sample(x, Partition::from_targets(4, {0, 3}), 0.4, PromptSpec::null(), rng);
    Parameter<double> pred("pred", randn({4 * L, P}, rng).cast<double>());
    Tape<double> tape(true);
    const Var loss = fm_loss(tape, tape.param(pred), s, g);
    tape.backward(loss);

    // Oracle: d/dpred mean((pred - v)^2) over the target rows.
    const double count = 2.0 * static_cast<double>(L * P);
    double value = 0;
    for (int k = 0; k < 4; ++k) {
        const bool target = s.partition.is_target(k);
        const auto v = patchify(s.velocity(k), g);
        for (std::size_t i = 0; i < L * P; ++i) {
            const std::size_t e = k * L * P + i;
            if (target) {
                const double d = pred.value[e] - v[i];
                value += d * d / count;
                EXPECT_NEAR(pred.grad[e], 2.0 * d / count, 1e-12);
            } else {
                EXPECT_EQ(pred.grad[e], 0.0);
            }
        }
    }
    EXPECT_NEAR(tape.value(loss)[0], value, 1e-12);
}

TEST(Sampler, EulerMatchesClosedFormAndConditionsPassThrough) {
    const auto d = DomainSpec::intrinsic_toy();
    const auto clip = render_intrinsic_clip(3, 2, 4, 4);
    const Partition p = Partition::from_targets(4, {1, 2});
    std::vector<Tensor<float>> conds(4);
    conds[0] = clip.stack.clips[0];
    conds[3] = clip.stack.clips[3];
    std::map<int, double> err;
    for (int N : {1, 8, 16, 32}) {
        std::vector<Tensor<float>> first;
        std::vector<double> seen_t;
        Rng rng(11);
        auto vel = [&](const std::vector<Tensor<float>>& s, const std::vector<double>& t) {
            if (first.empty()) {
                first = s;
                seen_t = t;
            }
            // dz/dt = 2t: exact z(1) = z(0) + 1, Euler on the uniform grid
            // accumulates (N - 1) / N.
            std::vector<Tensor<float>> out;
            for (std::size_t k = 0; k < s.size(); ++k) {
                out.push_back(Tensor<float>(s[k].shape(), static_cast<float>(2.0 * t[k])));
            }
            return out;
        };
        const ClipStack out = euler_sample(vel, d, p, conds, kClip, N, rng);
        EXPECT_EQ(seen_t, (std::vector<double>{1.0, 0.0, 0.0, 1.0}));
        EXPECT_EQ(first[0], data_to_model(conds[0]));
        EXPECT_EQ(out.clips[0], conds[0]);
        EXPECT_EQ(out.clips[3], conds[3]);
        double e = 0;
        for (int k : p.targets) {
            for (std::size_t i = 0; i < out.clips[k].size(); ++i) {
                const double z_euler = first[k][i] + (1.0 - 1.0 / N);
                const double expect = std::clamp((z_euler + 1.0) / 2.0, 0.0, 1.0);
                EXPECT_NEAR(out.clips[k][i], expect, 1e-6);
                const double exact = std::clamp((first[k][i] + 1.0 + 1.0) / 2.0, 0.0, 1.0);
                e = std::max(e, std::abs(out.clips[k][i] - exact));
            }
        }
        err[N] = e;
    }
    EXPECT_NEAR(err[16] / err[8], 0.5, 0.05);
    EXPECT_NEAR(err[32] / err[16], 0.5, 0.05);
}

TEST(Sampler, StraightPathIsExactForAnyStepCount) {
    // v = (x - z) / (1 - t) transports any start to x; Euler hits it exactly
    // at the final step.
    const auto d = DomainSpec::alpha_toy();
    const auto clip = render_alpha_clip(4, 2, 4, 4);
    const Partition p = task_preset("matting", d).partition;
    std::vector<Tensor<float>> conds(4);
    conds[alpha::kBlend] = clip.stack.clips[alpha::kBlend];
    for (int N : {1, 3, 32}) {
        Rng rng(12);
        auto vel = [&](const std::vector<Tensor<float>>& s, const std::vector<double>& t) {
            std::vector<Tensor<float>> out(s.size());
            for (int k : p.targets) {
                const auto x = data_to_model(clip.stack.clips[k]);
                out[k] = Tensor<float>(s[k].shape());
                for (std::size_t i = 0; i < x.size(); ++i) {
                    out[k][i] = static_cast<float>((x[i] - s[k][i]) / (1.0 - t[k]));
                }
            }
            out[alpha::kBlend] = Tensor<float>(s[alpha::kBlend].shape());
            return out;
        };
        const ClipStack out = euler_sample(vel, d, p, conds, kClip, N, rng);
        for (int k : p.targets) {
            for (std::size_t i = 0; i < out.clips[k].size(); ++i) {
                EXPECT_NEAR(out.clips[k][i], clip.stack.clips[k][i], 1e-5) << "N=" << N;
            }
        }
    }
}

TEST(Sampler, DeterministicAndValidated) {
    const auto d = DomainSpec::intrinsic_toy();
    const Partition p = Partition::from_targets(4, {0, 1, 2, 3});
    const std::vector<Tensor<float>> none(4);
    auto zero_vel = [](const std::vector<Tensor<float>>& s, const std::vector<double>&) {
        std::vector<Tensor<float>> out;
        for (const auto& x : s) out.push_back(Tensor<float>(x.shape()));
        return out;
    };
    Rng a(5), b(5), c(6);
    const auto sa = euler_sample(zero_vel, d, p, none, kClip, 4, a);
    const auto sb = euler_sample(zero_vel, d, p, none, kClip, 4, b);
    const auto sc = euler_sample(zero_vel, d, p, none, kClip, 4, c);
    for (int k = 0; k < 4; ++k) {
        EXPECT_EQ(sa.clips[k], sb.clips[k]);
        EXPECT_NE(sa.clips[k], sc.clips[k]);
        for (float v : sa.clips[k].values()) {
            EXPECT_GE(v, 0.0f);
            EXPECT_LE(v, 1.0f);
        }
    }
    Rng r(1);
    EXPECT_EQ(code_of([&] { euler_sample(zero_vel, d, p, none, kClip, 0, r); }), ErrorCode::kInvalidSteps);
    EXPECT_EQ(code_of([&] { euler_sample(zero_vel, d, Partition::from_targets(4, {0}), none, kClip, 2, r); }),
              ErrorCode::kMissingCondition);
}

TEST(Schedule, CosineEndpoints) {
    RunConfig cfg;
    EXPECT_DOUBLE_EQ(cosine_lr(0, cfg.finetune_steps, cfg.lr_init, cfg.lr_final), 1e-4);
    EXPECT_NEAR(cosine_lr(cfg.finetune_steps - 1, cfg.finetune_steps, cfg.lr_init, cfg.lr_final), 1e-6, 1e-18);
    const double mid = cosine_lr(2, 5, 1.0, 0.0);
    EXPECT_NEAR(mid, 0.5, 1e-12);
    for (int s = 1; s < 100; ++s) EXPECT_LE(cosine_lr(s, 100, 1.0, 0.1), cosine_lr(s - 1, 100, 1.0, 0.1));
}

TEST(AdamW, FirstStepAndSkipping) {
    Parameter<float> used("used", Tensor<float>({3}, {1.0f, -2.0f, 0.5f}));
    Parameter<float> unused("unused", Tensor<float>({2}, {3.0f, 4.0f}));
    Parameter<float> frozen("frozen", Tensor<float>({1}, {7.0f}), /*train=*/false);
    const auto before_unused = unused.value;
    Tape<float> tape(true);
    // loss = sum(used * c) + sum(frozen); unused never enters the tape.
    const Var l = ops::add(tape, ops::sum(tape, ops::mul(tape, tape.param(used), tape.constant(Tensor<float>({3}, {2, -1, 0.5f})))),
                           ops::sum(tape, tape.param(frozen)));
    tape.backward(l);
    AdamW<float> opt;
    const double lr = 1e-2;
    opt.step({&used, &unused, &frozen}, lr);
    const float g[3] = {2, -1, 0.5f};
    const float w0[3] = {1.0f, -2.0f, 0.5f};
    for (int i = 0; i < 3; ++i) {
        // First step: m_hat = g, v_hat = g^2.
        const double expect = w0[i] * (1.0 - lr * 1e-2) - lr * g[i] / (std::abs(g[i]) + 1e-8);
        EXPECT_NEAR(used.value[i], expect, 1e-7);
    }
    EXPECT_EQ(unused.value, before_unused);
    EXPECT_EQ(frozen.value[0], 7.0f);
    EXPECT_EQ(opt.steps_taken("used"), 1);
    EXPECT_EQ(opt.steps_taken("unused"), 0);
    EXPECT_EQ(opt.steps_taken("frozen"), 0);
}

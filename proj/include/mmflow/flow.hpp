// Copyright (C) 2026 The mmflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Stochastic condition masking and the rectified-flow objective. A training
// example noises only its target modalities along z_t = t x + (1 - t) eps;
// condition modalities are fed clean at t = 1 and carry no loss.

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "mmflow/config.hpp"
#include "mmflow/dit.hpp"
#include "mmflow/optim.hpp"
#include "mmflow/presets.hpp"
#include "mmflow/rng.hpp"
#include "mmflow/types.hpp"

namespace mmflow {

enum class PartitionMode { kIidBernoulli, kPresetMix };

struct WeightedPartition {
    Partition partition;
    double weight = 1.0;
};

struct PartitionPolicy {
    PartitionMode mode = PartitionMode::kIidBernoulli;
    double p = 0.5;
    std::vector<WeightedPartition> presets;
    double prompt_drop = 0.0;

    static PartitionPolicy from_config(const RunConfig& cfg, const DomainSpec& domain) {
        PartitionPolicy pol;
        pol.p = cfg.partition_p;
        pol.prompt_drop = cfg.prompt_drop;
        if (cfg.partition_mode == "preset_mix") {
            pol.mode = PartitionMode::kPresetMix;
            for (const auto& pw : cfg.preset_mix) {
                pol.presets.push_back({task_preset(pw.name, domain).partition, pw.weight});
            }
            MMFLOW_CHECK(!pol.presets.empty(), ErrorCode::kInvalidConfig, "preset_mix mode needs presets");
        }
        return pol;
    }
};

/// Draws a valid partition of n modalities. IID mode flips a p-coin per
/// modality and redraws when no target came up.
inline Partition sample_partition(Rng& rng, const PartitionPolicy& policy, int n) {
    MMFLOW_CHECK(n >= 1, ErrorCode::kInvalidConfig, "sample_partition needs n >= 1");
    if (policy.mode == PartitionMode::kPresetMix) {
        double total = 0.0;
        for (const auto& w : policy.presets) {
            total += w.weight;
        }
        MMFLOW_CHECK(total > 0.0, ErrorCode::kInvalidConfig, "preset weights sum to zero");
        double u = rng.uniform() * total;
        for (const auto& w : policy.presets) {
            if (u < w.weight) {
                return w.partition;
            }
            u -= w.weight;
        }
        return policy.presets.back().partition;
    }
    MMFLOW_CHECK(policy.p > 0.0 && policy.p <= 1.0, ErrorCode::kInvalidConfig, "partition_p must be in (0, 1]");
    for (;;) {
        std::uint32_t mask = 0;
        for (int k = 0; k < n; ++k) {
            if (rng.bernoulli(policy.p)) {
                mask |= 1u << k;
            }
        }
        if (mask != 0) {
            return Partition::from_mask(n, mask);
        }
    }
}

/// Training timestep, uniform on [0, 1).
inline double sample_timestep(Rng& rng) { return rng.uniform(); }

/// z_t = t x + (1 - t) eps elementwise. Exact at both endpoints.
template <class T>
Tensor<T> noise_interpolate(const Tensor<T>& x, const Tensor<T>& eps, double t) {
    require_same_shape(x, eps, "noise_interpolate");
    MMFLOW_CHECK(t >= 0.0 && t <= 1.0, ErrorCode::kInvalidTimestep, "t outside [0,1]");
    if (t == 1.0) {
        return x;
    }
    if (t == 0.0) {
        return eps;
    }
    const T tt = static_cast<T>(t), ts = static_cast<T>(1.0 - t);
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = tt * x[i] + ts * eps[i];
    }
    return out;
}

template <class T>
Tensor<T> gaussian_like(const Shape& shape, Rng& rng) {
    Tensor<T> out(shape);
    for (T& v : out.values()) {
        v = static_cast<T>(rng.normal());
    }
    return out;
}

/// One training example: clean MODEL-space stack, noise for each target,
/// a shared timestep and the partition.
template <class T>
struct FlowSample {
    std::vector<Tensor<T>> x;
    std::vector<Tensor<T>> eps;  // empty tensors at condition slots
    double t = 0.0;
    Partition partition;
    PromptSpec prompt;

    std::size_t modalities() const { return x.size(); }

    /// Network inputs: noised targets at t, clean conditions at t = 1.
    ForwardInputs<T> inputs(bool no_gating, AttentionMode mode) const {
        ForwardInputs<T> in;
        const int n = static_cast<int>(x.size());
        for (int k = 0; k < n; ++k) {
            const auto ku = static_cast<std::size_t>(k);
            if (partition.is_target(k)) {
                in.streams.push_back(noise_interpolate(x[ku], eps[ku], t));
                in.t.push_back(t);
            } else {
                in.streams.push_back(x[ku]);
                in.t.push_back(1.0);
            }
        }
        in.gates = gates_from_partition(partition, n, no_gating);
        in.prompt = prompt;
        in.mode = mode;
        return in;
    }

    /// Velocity target x - eps (zeros at condition slots).
    Tensor<T> velocity(int k) const {
        const auto ku = static_cast<std::size_t>(k);
        Tensor<T> v(x[ku].shape());
        if (!partition.is_target(k)) {
            return v;
        }
        for (std::size_t i = 0; i < v.size(); ++i) {
            v[i] = x[ku][i] - eps[ku][i];
        }
        return v;
    }
};

/// Builds a sample from a MODEL-space stack. Noise is drawn per target in
/// modality order.
template <class T>
FlowSample<T> make_flow_sample(std::vector<Tensor<T>> x_model, Partition partition, double t, PromptSpec prompt,
                               Rng& rng) {
    FlowSample<T> s;
    s.eps.resize(x_model.size());
    for (int k : partition.targets) {
        MMFLOW_CHECK(k >= 0 && static_cast<std::size_t>(k) < x_model.size(), ErrorCode::kUnknownId,
                     "target id out of range");
        s.eps[static_cast<std::size_t>(k)] = gaussian_like<T>(x_model[static_cast<std::size_t>(k)].shape(), rng);
    }
    s.x = std::move(x_model);
    s.t = t;
    s.partition = std::move(partition);
    s.prompt = prompt;
    return s;
}

/// Mean squared velocity error over every element of the target modalities.
template <class T>
double fm_loss(const std::vector<Tensor<T>>& pred, const std::vector<Tensor<T>>& x, const std::vector<Tensor<T>>& eps,
               const Partition& partition) {
    MMFLOW_CHECK(!partition.targets.empty(), ErrorCode::kEmptyTargets, "fm_loss with no targets");
    MMFLOW_CHECK(pred.size() == x.size(), ErrorCode::kShapeMismatch, "fm_loss needs one prediction per modality");
    double acc = 0.0;
    std::size_t count = 0;
    for (int k : partition.targets) {
        const auto ku = static_cast<std::size_t>(k);
        require_same_shape(pred[ku], x[ku], "fm_loss pred/x");
        require_same_shape(eps[ku], x[ku], "fm_loss eps/x");
        for (std::size_t i = 0; i < x[ku].size(); ++i) {
            // Target in working precision, as on the tape.
            const T v = x[ku][i] - eps[ku][i];
            const double d = static_cast<double>(pred[ku][i]) - static_cast<double>(v);
            acc += d * d;
        }
        count += x[ku].size();
    }
    return acc / static_cast<double>(count);
}

/// The same loss recorded on a tape against stacked token predictions [n*L, P].
template <class T>
Var fm_loss(Tape<T>& tape, Var pred_tokens, const FlowSample<T>& s, const PatchGrid& grid) {
    const std::size_t n = s.modalities(), L = grid.tokens(), P = grid.patch_dim();
    MMFLOW_CHECK(!s.partition.targets.empty(), ErrorCode::kEmptyTargets, "fm_loss with no targets");
    Tensor<T> target({n * L, P});
    std::vector<bool> mask(n * L, false);
    for (int k : s.partition.targets) {
        const auto ku = static_cast<std::size_t>(k);
        const Tensor<T> v = patchify(s.velocity(k), grid);
        std::copy(v.values().begin(), v.values().end(), target.data() + ku * L * P);
        std::fill(mask.begin() + static_cast<std::ptrdiff_t>(ku * L),
                  mask.begin() + static_cast<std::ptrdiff_t>((ku + 1) * L), true);
    }
    return ops::masked_mse(tape, pred_tokens, target, mask);
}

/// Forward Euler on the learned flow. Targets start at Gaussian noise and
/// integrate t_i = i/N, z += v/N; conditions are held clean at t = 1 and are
/// returned unmodified. `conditions` holds DATA-space clips (empty tensors at
/// target slots); the result is a DATA-space stack clamped to [0, 1].
///
/// `velocity(streams, t)` receives MODEL-space streams and per-stream times and
/// returns one velocity clip per stream. The state is integrated in double.
template <class VelocityFn>
ClipStack euler_sample(VelocityFn&& velocity, const DomainSpec& domain, const Partition& partition,
                       const std::vector<Tensor<float>>& conditions, const Shape& clip_shape, int steps, Rng& rng) {
    MMFLOW_CHECK(steps >= 1, ErrorCode::kInvalidSteps, "sampler needs N >= 1");
    validate_partition(partition, domain);
    const int n = domain.size();
    MMFLOW_CHECK(conditions.size() == static_cast<std::size_t>(n), ErrorCode::kMissingCondition,
                 "condition list must have one slot per modality");
    std::vector<Tensor<float>> streams(static_cast<std::size_t>(n));
    for (int k : partition.conditions) {
        const Tensor<float>& c = conditions[static_cast<std::size_t>(k)];
        MMFLOW_CHECK(!c.empty(), ErrorCode::kMissingCondition, "no clip for condition " + domain.modalities[k].name);
        require_same_shape(c, Tensor<float>(clip_shape), "condition clip");
        streams[static_cast<std::size_t>(k)] = data_to_model(c);
    }
    std::vector<Tensor<double>> z(static_cast<std::size_t>(n));
    for (int k : partition.targets) {
        z[static_cast<std::size_t>(k)] = gaussian_like<double>(clip_shape, rng);
    }
    std::vector<double> t(static_cast<std::size_t>(n), 1.0);
    const double dt = 1.0 / static_cast<double>(steps);
    for (int i = 0; i < steps; ++i) {
        const double ti = static_cast<double>(i) / static_cast<double>(steps);
        for (int k : partition.targets) {
            const auto ku = static_cast<std::size_t>(k);
            streams[ku] = z[ku].template cast<float>();
            t[ku] = ti;
        }
        const std::vector<Tensor<float>> v = velocity(std::as_const(streams), std::as_const(t));
        MMFLOW_CHECK(v.size() == streams.size(), ErrorCode::kShapeMismatch, "velocity must cover every stream");
        for (int k : partition.targets) {
            const auto ku = static_cast<std::size_t>(k);
            require_same_shape(v[ku], streams[ku], "velocity");
            for (std::size_t e = 0; e < z[ku].size(); ++e) {
                z[ku][e] += dt * static_cast<double>(v[ku][e]);
            }
        }
    }
    ClipStack out{domain, std::vector<Tensor<float>>(static_cast<std::size_t>(n)), ValueSpace::kData};
    for (int k = 0; k < n; ++k) {
        const auto ku = static_cast<std::size_t>(k);
        if (partition.is_target(k)) {
            out.clips[ku] = model_to_data(z[ku].template cast<float>(), /*clamp=*/true);
        } else {
            out.clips[ku] = conditions[ku];
        }
    }
    return out;
}

/// Velocity functor backed by a model for a fixed partition and prompt.
template <class T>
auto model_velocity(DiTModel<T>& model, const Partition& partition, const PromptSpec& prompt, bool no_gating,
                    AttentionMode mode) {
    return [&model, partition, prompt, no_gating, mode](const std::vector<Tensor<float>>& streams,
                                                        const std::vector<double>& t) {
        ForwardInputs<T> in;
        for (const auto& s : streams) {
            in.streams.push_back(s.template cast<T>());
        }
        in.t = t;
        in.gates = gates_from_partition(partition, static_cast<int>(streams.size()), no_gating);
        in.prompt = prompt;
        in.mode = mode;
        std::vector<Tensor<float>> out;
        for (const auto& v : model.predict(in)) {
            out.push_back(v.template cast<float>());
        }
        return out;
    };
}

struct StepOptions {
    bool no_gating = false;
    AttentionMode mode = AttentionMode::kCrossModal;
    int step = 0;  // for diagnostics only
};

/// One optimizer step over a batch: the loss is the batch mean of the
/// per-example objective. Returns that mean. Throws NONFINITE_LOSS before
/// touching any parameter when the loss or a gradient is not finite.
template <class T>
double train_step(DiTModel<T>& model, const std::vector<FlowSample<T>>& batch, AdamW<T>& opt, double lr,
                  const StepOptions& so = {}) {
    MMFLOW_CHECK(!batch.empty(), ErrorCode::kInvalidConfig, "empty batch");
    std::vector<Parameter<T>*> params = model.all_parameters();
    for (auto* p : params) {
        p->zero_grad();
    }
    const T seed = T{1} / static_cast<T>(batch.size());
    double total = 0.0;
    for (const auto& s : batch) {
        Tape<T> tape;
        const Var pred = model.forward(tape, s.inputs(so.no_gating, so.mode));
        const Var loss = fm_loss(tape, pred, s, model.grid());
        const double lv = static_cast<double>(tape.value(loss)[0]);
        if (!std::isfinite(lv)) {
            std::ostringstream msg;
            msg << "non-finite loss at step " << so.step << " (t=" << s.t << ", targets=" << s.partition.targets.size()
                << ")";
            throw Error(ErrorCode::kNonfiniteLoss, msg.str());
        }
        total += lv;
        tape.backward(loss, seed);
    }
    for (auto* p : params) {
        if (p->touched && !kernels::all_finite(p->grad)) {
            throw Error(ErrorCode::kNonfiniteLoss,
                        "non-finite gradient in " + p->name + " at step " + std::to_string(so.step));
        }
    }
    opt.step(params, lr);
    return total / static_cast<double>(batch.size());
}

}  // namespace mmflow

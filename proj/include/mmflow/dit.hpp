// Copyright (C) 2026 The mmflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Minimal video diffusion transformer. Every modality stream is patchified on
// its own, the streams are stacked along the token axis ("batch" of
// modalities), and each block applies AdaLN-modulated attention and MLP
// sublayers whose linears carry gated per-modality adapters.

#include <cmath>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmflow/attention.hpp"
#include "mmflow/config.hpp"
#include "mmflow/lora.hpp"
#include "mmflow/ops.hpp"
#include "mmflow/rng.hpp"
#include "mmflow/types.hpp"

namespace mmflow {

/// Geometry shared by patchify/unpatchify.
struct PatchGrid {
    std::size_t frames, height, width;
    std::size_t pt, ph, pw;

    static PatchGrid from(const RunConfig& c) {
        return {static_cast<std::size_t>(c.frames), static_cast<std::size_t>(c.height),
                static_cast<std::size_t>(c.width),  static_cast<std::size_t>(c.patch[0]),
                static_cast<std::size_t>(c.patch[1]), static_cast<std::size_t>(c.patch[2])};
    }

    std::size_t nt() const { return frames / pt; }
    std::size_t nh() const { return height / ph; }
    std::size_t nw() const { return width / pw; }
    std::size_t tokens() const { return nt() * nh() * nw(); }
    std::size_t patch_dim() const { return pt * ph * pw * 3; }

    void check(const Shape& clip) const {
        MMFLOW_CHECK(clip.size() == 4 && clip[0] == frames && clip[1] == height && clip[2] == width && clip[3] == 3,
                     ErrorCode::kShapeMismatch, "clip " + shape_str(clip) + " does not match the model grid");
        MMFLOW_CHECK(frames % pt == 0 && height % ph == 0 && width % pw == 0, ErrorCode::kShapeMismatch,
                     "clip dims not divisible by patch sizes");
    }
};

/// (T, H, W, 3) -> [L, pt*ph*pw*3]; tokens in (t, h, w) order, patch values
/// in (dt, dh, dw, c) order.
template <class T>
Tensor<T> patchify(const Tensor<T>& clip, const PatchGrid& g) {
    g.check(clip.shape());
    Tensor<T> out({g.tokens(), g.patch_dim()});
    std::size_t row = 0;
    for (std::size_t t0 = 0; t0 < g.nt(); ++t0) {
        for (std::size_t h0 = 0; h0 < g.nh(); ++h0) {
            for (std::size_t w0 = 0; w0 < g.nw(); ++w0, ++row) {
                T* dst = out.data() + row * g.patch_dim();
                for (std::size_t dt = 0; dt < g.pt; ++dt) {
                    for (std::size_t dh = 0; dh < g.ph; ++dh) {
                        const std::size_t t = t0 * g.pt + dt, h = h0 * g.ph + dh, w = w0 * g.pw;
                        const T* src = clip.data() + ((t * g.height + h) * g.width + w) * 3;
                        dst = std::copy_n(src, g.pw * 3, dst);
                    }
                }
            }
        }
    }
    return out;
}

template <class T>
Tensor<T> unpatchify(const Tensor<T>& tokens, const PatchGrid& g) {
    MMFLOW_CHECK(tokens.rows() == g.tokens() && tokens.cols() == g.patch_dim(), ErrorCode::kShapeMismatch,
                 "token tensor " + shape_str(tokens.shape()) + " does not match the patch grid");
    Tensor<T> clip({g.frames, g.height, g.width, 3});
    std::size_t row = 0;
    for (std::size_t t0 = 0; t0 < g.nt(); ++t0) {
        for (std::size_t h0 = 0; h0 < g.nh(); ++h0) {
            for (std::size_t w0 = 0; w0 < g.nw(); ++w0, ++row) {
                const T* src = tokens.data() + row * g.patch_dim();
                for (std::size_t dt = 0; dt < g.pt; ++dt) {
                    for (std::size_t dh = 0; dh < g.ph; ++dh) {
                        const std::size_t t = t0 * g.pt + dt, h = h0 * g.ph + dh, w = w0 * g.pw;
                        std::copy_n(src, g.pw * 3, clip.data() + ((t * g.height + h) * g.width + w) * 3);
                        src += g.pw * 3;
                    }
                }
            }
        }
    }
    return clip;
}

/// Initial value of the learned positional table: separable sin/cos features
/// per grid axis (t, h, w), each axis getting an even share of the channels
/// (leftover channels start at 0). Frequencies run geometrically from pi (one
/// token period 2) down to pi / (2 n), so every axis length is resolved.
template <class T>
Tensor<T> sincos_positions(const PatchGrid& g, std::size_t d) {
    Tensor<T> out({g.tokens(), d});
    const std::size_t per_axis = 2 * (d / 6);
    const std::size_t freqs = per_axis / 2;
    const std::size_t lens[3] = {g.nt(), g.nh(), g.nw()};
    std::size_t row = 0;
    for (std::size_t it = 0; it < g.nt(); ++it) {
        for (std::size_t ih = 0; ih < g.nh(); ++ih) {
            for (std::size_t iw = 0; iw < g.nw(); ++iw, ++row) {
                const std::size_t pos[3] = {it, ih, iw};
                for (std::size_t a = 0; a < 3; ++a) {
                    const double lowest = std::numbers::pi / (2.0 * static_cast<double>(lens[a]));
                    for (std::size_t f = 0; f < freqs; ++f) {
                        const double u = freqs > 1 ? static_cast<double>(f) / static_cast<double>(freqs - 1) : 0.0;
                        const double w = std::numbers::pi * std::pow(lowest / std::numbers::pi, u);
                        const double arg = w * static_cast<double>(pos[a]);
                        out[row * d + a * per_axis + 2 * f] = static_cast<T>(std::sin(arg));
                        out[row * d + a * per_axis + 2 * f + 1] = static_cast<T>(std::cos(arg));
                    }
                }
            }
        }
    }
    return out;
}

/// Inputs of one forward pass over a (possibly partial) modality stack.
template <class T>
struct ForwardInputs {
    std::vector<Tensor<T>> streams;  // MODEL-space (T, H, W, 3), one per modality
    std::vector<double> t;           // per-stream flow time; conditions use 1
    std::vector<int> gates;          // m_k per stream
    PromptSpec prompt;
    AttentionMode mode = AttentionMode::kCrossModal;
};

/// Optional instrumentation of a forward pass.
struct ForwardHooks {
    AttentionProbe* attention = nullptr;
    /// Receives the per-stream timestep values fed to the conditioning path.
    std::vector<double>* timesteps = nullptr;
    /// Receives the gates each stream's adapted linears were evaluated with.
    std::vector<int>* gates = nullptr;
};

template <class T>
class DiTModel {
public:
    static constexpr const char* kAdaptedSublayers[] = {"attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc1", "mlp.fc2"};

    DiTModel(const RunConfig& cfg, Rng& rng) : cfg_(cfg), grid_(PatchGrid::from(cfg)) {
        cfg_.validate();
        const auto d = static_cast<std::size_t>(cfg.d_model);
        const auto P = grid_.patch_dim();
        const auto hidden = d * static_cast<std::size_t>(cfg.mlp_ratio);
        add_linear("embed.patch", P, d, rng);
        add("embed.pos", sincos_positions<T>(grid_, d));
        add_linear("time.fc1", d, d, rng);
        add_linear("time.fc2", d, d, rng);
        add("prompt.shape", normal_tensor({kShapeNames.size(), d}, 0.1, rng));
        add("prompt.color", normal_tensor({kColorNames.size(), d}, 0.1, rng));
        add("prompt.scene", normal_tensor({static_cast<std::size_t>(kSceneValues), d}, 0.1, rng));
        add("prompt.motion", normal_tensor({kMotionNames.size(), d}, 0.1, rng));
        add("prompt.null", normal_tensor({1, d}, 0.1, rng));
        for (int b = 0; b < cfg.n_blocks; ++b) {
            const std::string p = block_prefix(b);
            add_linear(p + "attn.q", d, d, rng);
            add_linear(p + "attn.k", d, d, rng);
            add_linear(p + "attn.v", d, d, rng);
            add_linear(p + "attn.o", d, d, rng);
            add_linear(p + "mlp.fc1", d, hidden, rng);
            add_linear(p + "mlp.fc2", hidden, d, rng);
            add_linear(p + "adaln", d, 6 * d, rng, /*zero=*/true);
        }
        add_linear("final.adaln", d, 2 * d, rng, /*zero=*/true);
        add_linear("final.head", d, P, rng, /*zero=*/true);
    }

    DiTModel(const DiTModel&) = delete;
    DiTModel& operator=(const DiTModel&) = delete;
    DiTModel(DiTModel&&) noexcept = default;
    DiTModel& operator=(DiTModel&&) noexcept = default;

    const RunConfig& config() const { return cfg_; }
    const PatchGrid& grid() const { return grid_; }

    /// Adapted base linears in registration order.
    std::vector<AdaptedLayer> adapted_layers() const {
        std::vector<AdaptedLayer> out;
        for (int b = 0; b < cfg_.n_blocks; ++b) {
            for (const char* s : kAdaptedSublayers) {
                const std::string name = block_prefix(b) + s;
                const Tensor<T>& w = param(name + ".W").value;
                out.push_back({name, w.dim(1), w.dim(0)});
            }
        }
        return out;
    }

    /// Fresh adapters (B = 0) for every modality of `domain`. Shared mode also
    /// adds a zero-initialized per-modality offset embedding.
    void attach_adapters(const DomainSpec& domain, int rank, bool shared, Rng& rng) {
        adapters_ = std::make_unique<AdapterRegistry<T>>(adapted_layers(), domain, rank, shared,
                                                         static_cast<T>(cfg_.lora_scale), rng);
        if (shared) {
            modality_tags_ = std::make_unique<Parameter<T>>(
                "embed.modality", Tensor<T>({static_cast<std::size_t>(domain.size()),
                                             static_cast<std::size_t>(cfg_.d_model)}));
        } else {
            modality_tags_.reset();
        }
    }

    void detach_adapters() {
        adapters_.reset();
        modality_tags_.reset();
    }

    bool has_adapters() const { return adapters_ != nullptr; }
    AdapterRegistry<T>& adapters() { return *adapters_; }
    const AdapterRegistry<T>& adapters() const { return *adapters_; }

    void set_base_trainable(bool trainable) {
        for (auto& p : base_) {
            p->trainable = trainable;
        }
    }

    std::vector<Parameter<T>*> base_parameters() {
        std::vector<Parameter<T>*> out;
        for (auto& p : base_) {
            out.push_back(p.get());
        }
        return out;
    }

    /// Base, then offset tags, then adapters: the checkpoint manifest order.
    std::vector<Parameter<T>*> all_parameters() {
        std::vector<Parameter<T>*> out = base_parameters();
        if (modality_tags_) {
            out.push_back(modality_tags_.get());
        }
        if (adapters_) {
            for (auto* p : adapters_->parameters()) {
                out.push_back(p);
            }
        }
        return out;
    }

    std::vector<Parameter<T>*> trainable_parameters() {
        std::vector<Parameter<T>*> out;
        for (auto* p : all_parameters()) {
            if (p->trainable) {
                out.push_back(p);
            }
        }
        return out;
    }

    Parameter<T>& param(const std::string& name) {
        return const_cast<Parameter<T>&>(std::as_const(*this).param(name));
    }

    const Parameter<T>& param(const std::string& name) const {
        const auto it = index_.find(name);
        MMFLOW_CHECK(it != index_.end(), ErrorCode::kIndexOutOfBounds, "no parameter " + name);
        return *base_[it->second];
    }

    Parameter<T>* find_param(const std::string& name) {
        for (auto* p : all_parameters()) {
            if (p->name == name) {
                return p;
            }
        }
        return nullptr;
    }

    /// Records the forward pass; returns stacked velocity tokens [n*L, P].
    Var forward(Tape<T>& tape, const ForwardInputs<T>& in, const ForwardHooks& hooks = {}) {
        const std::size_t n = in.streams.size();
        MMFLOW_CHECK(n > 0 && in.t.size() == n && in.gates.size() == n, ErrorCode::kShapeMismatch,
                     "forward inputs need one timestep and gate per stream");
        for (double t : in.t) {
            MMFLOW_CHECK(t >= 0.0 && t <= 1.0, ErrorCode::kInvalidTimestep, "timestep outside [0,1]");
        }
        if (hooks.timesteps) {
            *hooks.timesteps = in.t;
        }
        if (hooks.gates) {
            *hooks.gates = in.gates;
        }
        const std::size_t L = grid_.tokens(), P = grid_.patch_dim(), d = static_cast<std::size_t>(cfg_.d_model);

        // Patch tokens of all streams stacked along rows.
        Tensor<T> tokens({n * L, P});
        for (std::size_t k = 0; k < n; ++k) {
            const Tensor<T> pk = patchify(in.streams[k], grid_);
            std::copy(pk.values().begin(), pk.values().end(), tokens.data() + k * L * P);
        }
        Var h = ops::linear(tape, tape.constant(std::move(tokens)), p(tape, "embed.patch.W"), p(tape, "embed.patch.b"));
        h = ops::add_tiled(tape, h, p(tape, "embed.pos"));
        if (modality_tags_) {
            Tensor<T> onehot({n * L, n});
            for (std::size_t r = 0; r < n * L; ++r) {
                onehot[r * n + r / L] = T{1};
            }
            h = ops::add(tape, h, ops::matmul(tape, tape.constant(std::move(onehot)), tape.param(*modality_tags_)));
        }

        // Conditioning vector per stream: time MLP + prompt embedding.
        Tensor<T> temb({n, d});
        for (std::size_t k = 0; k < n; ++k) {
            const Tensor<T> e = kernels::timestep_embedding<T>(in.t[k], d);
            std::copy(e.values().begin(), e.values().end(), temb.data() + k * d);
        }
        Var c = ops::linear(tape, tape.constant(std::move(temb)), p(tape, "time.fc1.W"), p(tape, "time.fc1.b"));
        c = ops::linear(tape, ops::silu(tape, c), p(tape, "time.fc2.W"), p(tape, "time.fc2.b"));
        c = ops::add_tiled(tape, c, ops::reshape(tape, prompt_embedding(tape, in.prompt), {1, d}));
        const Var sc = ops::silu(tape, c);

        for (int b = 0; b < cfg_.n_blocks; ++b) {
            const std::string pre = block_prefix(b);
            const Var mod = ops::linear(tape, sc, p(tape, pre + "adaln.W"), p(tape, pre + "adaln.b"));
            auto chunk = [&](std::size_t i) { return ops::slice_cols(tape, mod, i * d, d); };
            const Var a = ops::modulate(tape, ops::layer_norm(tape, h), chunk(0), chunk(1));
            const Var q = adapted(tape, a, pre + "attn.q", in.gates);
            const Var kk = adapted(tape, a, pre + "attn.k", in.gates);
            const Var v = adapted(tape, a, pre + "attn.v", in.gates);
            const Var att = ops::attention(tape, q, kk, v, n, static_cast<std::size_t>(cfg_.n_heads), in.mode,
                                           hooks.attention);
            h = ops::gated_residual(tape, h, adapted(tape, att, pre + "attn.o", in.gates), chunk(2));
            const Var a2 = ops::modulate(tape, ops::layer_norm(tape, h), chunk(3), chunk(4));
            const Var m1 = ops::gelu(tape, adapted(tape, a2, pre + "mlp.fc1", in.gates));
            h = ops::gated_residual(tape, h, adapted(tape, m1, pre + "mlp.fc2", in.gates), chunk(5));
        }
        const Var fmod = ops::linear(tape, sc, p(tape, "final.adaln.W"), p(tape, "final.adaln.b"));
        const Var out = ops::modulate(tape, ops::layer_norm(tape, h), ops::slice_cols(tape, fmod, 0, d),
                                      ops::slice_cols(tape, fmod, d, d));
        return ops::linear(tape, out, p(tape, "final.head.W"), p(tape, "final.head.b"));
    }

    /// Inference forward: per-stream velocity clips.
    std::vector<Tensor<T>> predict(const ForwardInputs<T>& in, const ForwardHooks& hooks = {}) {
        Tape<T> tape(/*grad_enabled=*/false);
        const Var y = forward(tape, in, hooks);
        return split_streams(tape.value(y), in.streams.size());
    }

    std::vector<Tensor<T>> split_streams(const Tensor<T>& stacked, std::size_t n) const {
        const std::size_t L = grid_.tokens(), P = grid_.patch_dim();
        std::vector<Tensor<T>> out;
        for (std::size_t k = 0; k < n; ++k) {
            Tensor<T> tk({L, P}, std::vector<T>(stacked.data() + k * L * P, stacked.data() + (k + 1) * L * P));
            out.push_back(unpatchify(tk, grid_));
        }
        return out;
    }

private:
    static std::string block_prefix(int b) { return "blocks." + std::to_string(b) + "."; }

    static Tensor<T> normal_tensor(Shape s, double sd, Rng& rng) {
        Tensor<T> t(std::move(s));
        for (T& v : t.values()) {
            v = static_cast<T>(sd * rng.normal());
        }
        return t;
    }

    void add(std::string name, Tensor<T> value) {
        index_.emplace(name, base_.size());
        base_.push_back(std::make_unique<Parameter<T>>(std::move(name), std::move(value)));
    }

    void add_linear(const std::string& name, std::size_t d_in, std::size_t d_out, Rng& rng, bool zero = false) {
        add(name + ".W", zero ? Tensor<T>({d_out, d_in}) : normal_tensor({d_out, d_in}, 1.0 / std::sqrt(double(d_in)), rng));
        add(name + ".b", Tensor<T>({d_out}));
    }

    Var p(Tape<T>& tape, const std::string& name) { return tape.param(param(name)); }

    Var prompt_embedding(Tape<T>& tape, const PromptSpec& prompt) {
        if (prompt.is_null) {
            return ops::embed_lookup(tape, p(tape, "prompt.null"), 0);
        }
        Var e = ops::embed_lookup(tape, p(tape, "prompt.shape"), static_cast<std::size_t>(prompt.shape));
        e = ops::add(tape, e, ops::embed_lookup(tape, p(tape, "prompt.color"), static_cast<std::size_t>(prompt.color)));
        e = ops::add(tape, e, ops::embed_lookup(tape, p(tape, "prompt.scene"), static_cast<std::size_t>(prompt.scene)));
        return ops::add(tape, e,
                        ops::embed_lookup(tape, p(tape, "prompt.motion"), static_cast<std::size_t>(prompt.motion)));
    }

    Var adapted(Tape<T>& tape, Var x, const std::string& layer, const std::vector<int>& gates) {
        std::vector<StreamAdapter> streams(gates.size());
        if (adapters_) {
            for (std::size_t k = 0; k < gates.size(); ++k) {
                if (gates[k] == 0) {
                    continue;
                }
                LoraAdapter<T>& ad = adapters_->adapter(layer, static_cast<int>(k));
                streams[k] = {tape.param(ad.A), tape.param(ad.B), 1, static_cast<double>(ad.scale)};
            }
        }
        return ops::gated_linear(tape, x, p(tape, layer + ".W"), p(tape, layer + ".b"), streams);
    }

    RunConfig cfg_;
    PatchGrid grid_;
    std::vector<std::unique_ptr<Parameter<T>>> base_;
    std::unordered_map<std::string, std::size_t> index_;
    std::unique_ptr<AdapterRegistry<T>> adapters_;
    std::unique_ptr<Parameter<T>> modality_tags_;
};

}  // namespace mmflow

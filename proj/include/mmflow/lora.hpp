// Copyright (C) 2026 The mmflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Decoupled gated low-rank adapters. Each adapted base linear carries one
// adapter per modality; an adapter contributes only while its modality is a
// generation target:  W'_k = W + m_k * scale * B_k A_k.

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "mmflow/kernels.hpp"
#include "mmflow/ops.hpp"
#include "mmflow/rng.hpp"
#include "mmflow/types.hpp"

namespace mmflow {

template <class T>
struct LoraAdapter {
    Parameter<T> A;  // [r, d_in], N(0, 1/r)
    Parameter<T> B;  // [d_out, r], zero
    T scale = T{1};

    std::size_t rank() const { return A.value.dim(0); }
    std::size_t d_in() const { return A.value.dim(1); }
    std::size_t d_out() const { return B.value.dim(0); }
};

struct AdaptedLayer {
    std::string name;
    std::size_t d_in = 0;
    std::size_t d_out = 0;
};

/// (layer, modality) -> adapter. In shared mode every modality of a layer maps
/// to one adapter (the decoupling ablation).
template <class T>
class AdapterRegistry {
public:
    AdapterRegistry() = default;

    AdapterRegistry(const std::vector<AdaptedLayer>& layers, const DomainSpec& domain, int rank, bool shared,
                    T scale, Rng& rng)
        : n_modalities_(domain.size()), rank_(rank), shared_(shared), domain_name_(domain.name) {
        for (const auto& layer : layers) {
            MMFLOW_CHECK(rank >= 1 && static_cast<std::size_t>(rank) < std::min(layer.d_in, layer.d_out),
                         ErrorCode::kInvalidConfig, "lora rank must be below min(d_in, d_out) for " + layer.name);
            Entry e{layer, {}};
            const int copies = shared ? 1 : n_modalities_;
            for (int k = 0; k < copies; ++k) {
                const std::string tag = shared ? "shared" : domain.modalities[static_cast<std::size_t>(k)].name;
                auto ad = std::make_unique<LoraAdapter<T>>();
                const auto r = static_cast<std::size_t>(rank);
                ad->A = Parameter<T>("lora." + layer.name + "." + tag + ".A", Tensor<T>({r, layer.d_in}));
                ad->B = Parameter<T>("lora." + layer.name + "." + tag + ".B", Tensor<T>({layer.d_out, r}));
                const double sd = 1.0 / std::sqrt(static_cast<double>(rank));
                for (T& v : ad->A.value.values()) {
                    v = static_cast<T>(sd * rng.normal());
                }
                ad->scale = scale;
                e.adapters.push_back(std::move(ad));
            }
            entries_.push_back(std::move(e));
        }
    }

    bool empty() const noexcept { return entries_.empty(); }
    bool shared() const noexcept { return shared_; }
    int n_modalities() const noexcept { return n_modalities_; }
    int rank() const noexcept { return rank_; }
    const std::string& domain_name() const noexcept { return domain_name_; }

    bool has_layer(const std::string& layer) const { return find(layer) != nullptr; }

    LoraAdapter<T>& adapter(const std::string& layer, int k) {
        return const_cast<LoraAdapter<T>&>(std::as_const(*this).adapter(layer, k));
    }

    const LoraAdapter<T>& adapter(const std::string& layer, int k) const {
        const Entry* e = find(layer);
        MMFLOW_CHECK(e != nullptr, ErrorCode::kMissingAdapter, "no adapters for layer " + layer);
        MMFLOW_CHECK(k >= 0 && k < n_modalities_, ErrorCode::kMissingAdapter,
                     "no adapter for modality " + std::to_string(k) + " on " + layer);
        return *e->adapters[shared_ ? 0 : static_cast<std::size_t>(k)];
    }

    /// Every distinct adapter parameter (A and B), in registration order.
    std::vector<Parameter<T>*> parameters() {
        std::vector<Parameter<T>*> out;
        for (auto& e : entries_) {
            for (auto& ad : e.adapters) {
                out.push_back(&ad->A);
                out.push_back(&ad->B);
            }
        }
        return out;
    }

    std::vector<const LoraAdapter<T>*> all_adapters() const {
        std::vector<const LoraAdapter<T>*> out;
        for (const auto& e : entries_) {
            for (const auto& ad : e.adapters) {
                out.push_back(ad.get());
            }
        }
        return out;
    }

private:
    struct Entry {
        AdaptedLayer layer;
        std::vector<std::unique_ptr<LoraAdapter<T>>> adapters;
    };

    const Entry* find(const std::string& layer) const {
        for (const auto& e : entries_) {
            if (e.layer.name == layer) {
                return &e;
            }
        }
        return nullptr;
    }

    int n_modalities_ = 0;
    int rank_ = 0;
    bool shared_ = false;
    std::string domain_name_;
    std::vector<Entry> entries_;
};

/// m_k = 1 iff k is a target; all ones when gating is disabled.
inline std::vector<int> gates_from_partition(const Partition& p, int n_modalities, bool no_gating = false) {
    std::vector<int> m(static_cast<std::size_t>(n_modalities), no_gating ? 1 : 0);
    for (int k : p.targets) {
        m.at(static_cast<std::size_t>(k)) = 1;
    }
    return m;
}

/// Sum of r (d_in + d_out) over distinct adapters.
template <class T>
std::size_t trainable_param_count(const AdapterRegistry<T>& registry) {
    std::size_t total = 0;
    for (const auto* ad : registry.all_adapters()) {
        total += ad->rank() * (ad->d_in() + ad->d_out());
    }
    return total;
}

/// out += scale * (x A^T) B^T, accumulated into `out` row block.
template <class T>
void add_lora_delta(const T* x, std::size_t rows, std::size_t d_in, const LoraAdapter<T>& ad, T* out,
                    std::size_t d_out) {
    const std::size_t r = ad.rank();
    kernels::RowMat<T> h = kernels::view(x, rows, d_in, d_in) * kernels::view(ad.A.value).transpose();
    auto o = kernels::view(out, rows, d_out, d_out);
    o.noalias() += (ad.scale * h) * kernels::view(ad.B.value.data(), d_out, r, r).transpose();
}

/// x W^T + b + m_k * scale * (x A_k^T) B_k^T. With m_k = 0 the adapter is not
/// evaluated, so the result is the base layer output bit for bit.
template <class T>
Tensor<T> apply_gated_linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b,
                             const AdapterRegistry<T>& registry, const std::string& layer, int k, int gate) {
    const LoraAdapter<T>& ad = registry.adapter(layer, k);
    Tensor<T> out = kernels::linear(x, w, b);
    if (gate != 0) {
        add_lora_delta(x.data(), x.rows(), x.cols(), ad, out.data(), out.cols());
    }
    return out;
}

/// Per-stream adapter binding for the fused tape op. An invalid A means the
/// stream has no adapter on this layer.
struct StreamAdapter {
    Var A;
    Var B;
    int gate = 0;
    double scale = 1.0;
};

namespace ops {

/// Stacked-stream gated linear: x is [n*L, d_in] with stream k occupying rows
/// [k*L, (k+1)*L). The base product is computed once for all rows; each gated
/// stream adds its own low-rank delta.
template <class T>
Var gated_linear(Tape<T>& tape, Var x, Var w, Var b, const std::vector<StreamAdapter>& streams) {
    const Tensor<T>& xv = tape.value(x);
    const std::size_t n = streams.size();
    MMFLOW_CHECK(n > 0 && xv.rows() % n == 0, ErrorCode::kShapeMismatch, "gated_linear rows not divisible by streams");
    const std::size_t L = xv.rows() / n, d_in = xv.cols();
    Tensor<T> out = kernels::linear(xv, tape.value(w), b.valid() ? &tape.value(b) : nullptr);
    const std::size_t d_out = out.cols();

    struct Saved {
        std::size_t k;
        Var A, B;
        T scale;
        kernels::RowMat<T> h;  // x_k A^T
    };
    std::vector<Saved> saved;
    std::vector<Var> inputs{x, w};
    if (b.valid()) {
        inputs.push_back(b);
    }
    for (std::size_t k = 0; k < n; ++k) {
        const StreamAdapter& s = streams[k];
        if (s.gate == 0 || !s.A.valid()) {
            continue;
        }
        const Tensor<T>& A = tape.value(s.A);
        const Tensor<T>& B = tape.value(s.B);
        const std::size_t r = A.dim(0);
        MMFLOW_CHECK(A.dim(1) == d_in && B.dim(0) == d_out && B.dim(1) == r, ErrorCode::kShapeMismatch,
                     "adapter shape does not match base layer");
        const T sc = static_cast<T>(s.scale);
        kernels::RowMat<T> h = kernels::view(xv.data() + k * L * d_in, L, d_in, d_in) * kernels::view(A).transpose();
        kernels::view(out.data() + k * L * d_out, L, d_out, d_out).noalias() += (sc * h) * kernels::view(B).transpose();
        saved.push_back({k, s.A, s.B, sc, std::move(h)});
        inputs.push_back(s.A);
        inputs.push_back(s.B);
    }

    return tape.push(std::move(out), inputs,
                     [x, w, b, L, d_in, d_out, saved = std::move(saved)](Tape<T>& tp, std::size_t self) {
                         const Tensor<T>& g = tp.grad(Var{self});
                         const Tensor<T>& xv = tp.value(x);
                         auto gv = kernels::view(g);
                         if (tp.requires_grad(x)) {
                             kernels::view(tp.grad(x)).noalias() += gv * kernels::view(tp.value(w));
                         }
                         if (tp.requires_grad(w)) {
                             kernels::view(tp.grad(w)).noalias() += gv.transpose() * kernels::view(xv);
                         }
                         if (b.valid() && tp.requires_grad(b)) {
                             Tensor<T>& gb = tp.grad(b);
                             for (std::size_t i = 0; i < g.size(); ++i) {
                                 gb[i % d_out] += g[i];
                             }
                         }
                         for (const Saved& s : saved) {
                             const Tensor<T>& A = tp.value(s.A);
                             const Tensor<T>& B = tp.value(s.B);
                             const std::size_t r = A.dim(0);
                             auto gk = kernels::view(g.data() + s.k * L * d_out, L, d_out, d_out);
                             auto xk = kernels::view(xv.data() + s.k * L * d_in, L, d_in, d_in);
                             if (tp.requires_grad(s.B)) {
                                 kernels::view(tp.grad(s.B)).noalias() += s.scale * (gk.transpose() * s.h);
                             }
                             kernels::RowMat<T> gh = s.scale * (gk * kernels::view(B));  // [L, r]
                             if (tp.requires_grad(s.A)) {
                                 kernels::view(tp.grad(s.A)).noalias() += gh.transpose() * xk;
                             }
                             if (tp.requires_grad(x)) {
                                 Tensor<T>& gx = tp.grad(x);
                                 kernels::view(gx.data() + s.k * L * d_in, L, d_in, d_in).noalias() +=
                                     gh * kernels::view(A.data(), r, d_in, d_in);
                             }
                         }
                     });
}

}  // namespace ops
}  // namespace mmflow

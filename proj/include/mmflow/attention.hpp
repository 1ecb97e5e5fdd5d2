// Copyright (C) 2026 The mmflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Cross-modal self-attention: every modality keeps its own queries but attends
// over the keys and values of all modalities concatenated along the token axis.
// The vanilla mode restricts each modality to its own keys.

#include <cmath>
#include <vector>

#include "mmflow/kernels.hpp"
#include "mmflow/tape.hpp"

namespace mmflow {

enum class AttentionMode { kCrossModal, kVanilla };

/// Per-modality q/k/v tensors, each (n_heads, L, d_head).
template <class T>
struct AttentionBatch {
    std::vector<Tensor<T>> q;
    std::vector<Tensor<T>> k;
    std::vector<Tensor<T>> v;

    std::size_t modalities() const { return q.size(); }

    void check() const {
        MMFLOW_CHECK(!q.empty() && q.size() == k.size() && q.size() == v.size(), ErrorCode::kShapeMismatch,
                     "attention batch needs matching q/k/v lists");
        for (std::size_t i = 0; i < q.size(); ++i) {
            for (const auto* t : {&q[i], &k[i], &v[i]}) {
                MMFLOW_CHECK(t->rank() == 3 && t->shape() == q.front().shape(), ErrorCode::kShapeMismatch,
                             "all q/k/v must share (n_heads, L, d_head)");
            }
        }
    }
};

namespace detail {

/// Concatenates (H, L, d) tensors along the token axis.
template <class T>
Tensor<T> concat_tokens(const std::vector<Tensor<T>>& parts) {
    const std::size_t H = parts[0].dim(0), L = parts[0].dim(1), d = parts[0].dim(2), n = parts.size();
    Tensor<T> out({H, n * L, d});
    for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t i = 0; i < n; ++i) {
            std::copy_n(parts[i].data() + h * L * d, L * d, out.data() + (h * n * L + i * L) * d);
        }
    }
    return out;
}

template <class T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
    const std::size_t B = x.dim(0), m = x.dim(1), n = x.dim(2);
    Tensor<T> out({B, n, m});
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                out[(b * n + j) * m + i] = x[(b * m + i) * n + j];
            }
        }
    }
    return out;
}

/// Attention probabilities softmax(q k^T / sqrt(d)) for q (H, Lq, d), k (H, Lk, d).
template <class T>
Tensor<T> attention_weights(const Tensor<T>& q, const Tensor<T>& k) {
    Tensor<T> s = kernels::matmul(q, transpose_last2(k));
    const T inv = T{1} / std::sqrt(static_cast<T>(q.dim(2)));
    for (T& v : s.values()) {
        v *= inv;
    }
    kernels::softmax_rows_inplace(s.data(), s.rows(), s.cols());
    return s;
}

}  // namespace detail

/// Softmax(q_i k_shared^T / sqrt(d_k)) v_shared for each modality i.
template <class T>
std::vector<Tensor<T>> cmsa_attention(const AttentionBatch<T>& batch) {
    batch.check();
    const Tensor<T> k_shared = detail::concat_tokens(batch.k);
    const Tensor<T> v_shared = detail::concat_tokens(batch.v);
    std::vector<Tensor<T>> out;
    for (const auto& q : batch.q) {
        out.push_back(kernels::matmul(detail::attention_weights(q, k_shared), v_shared));
    }
    return out;
}

template <class T>
std::vector<Tensor<T>> vanilla_attention(const AttentionBatch<T>& batch) {
    batch.check();
    std::vector<Tensor<T>> out;
    for (std::size_t i = 0; i < batch.modalities(); ++i) {
        out.push_back(kernels::matmul(detail::attention_weights(batch.q[i], batch.k[i]), batch.v[i]));
    }
    return out;
}

/// n x n matrix whose (i, j) entry is the attention mass modality-i queries
/// place on modality-j keys, averaged over heads and queries.
template <class T>
Tensor<double> attention_mass(const AttentionBatch<T>& batch, AttentionMode mode) {
    batch.check();
    const std::size_t n = batch.modalities();
    Tensor<double> mass({n, n});
    const std::size_t H = batch.q[0].dim(0), L = batch.q[0].dim(1);
    if (mode == AttentionMode::kVanilla) {
        for (std::size_t i = 0; i < n; ++i) {
            mass[i * n + i] = 1.0;
        }
        return mass;
    }
    const Tensor<T> k_shared = detail::concat_tokens(batch.k);
    for (std::size_t i = 0; i < n; ++i) {
        const Tensor<T> w = detail::attention_weights(batch.q[i], k_shared);
        for (std::size_t r = 0; r < H * L; ++r) {
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < L; ++c) {
                    s += static_cast<double>(w[r * n * L + j * L + c]);
                }
                mass[i * n + j] += s / static_cast<double>(H * L);
            }
        }
    }
    return mass;
}

/// Collects per-call attention mass matrices during a model forward pass.
struct AttentionProbe {
    std::vector<Tensor<double>> mass;  // one [n, n] matrix per attention call (block)
};

namespace ops {

/// Fused multi-head attention over stacked streams. q, k, v are
/// [n*L, d_model] with heads laid out as contiguous column groups and stream s
/// occupying rows [s*L, (s+1)*L). In cross-modal mode every query row attends
/// to all n*L key rows; in vanilla mode only to its own stream's rows.
template <class T>
Var attention(Tape<T>& tape, Var q, Var k, Var v, std::size_t n_streams, std::size_t n_heads, AttentionMode mode,
              AttentionProbe* probe = nullptr) {
    const Tensor<T>& qv = tape.value(q);
    const Tensor<T>& kv = tape.value(k);
    const Tensor<T>& vv = tape.value(v);
    require_same_shape(qv, kv, "attention q/k");
    require_same_shape(qv, vv, "attention q/v");
    const std::size_t R = qv.rows(), D = qv.cols();
    MMFLOW_CHECK(n_streams > 0 && R % n_streams == 0 && n_heads > 0 && D % n_heads == 0, ErrorCode::kShapeMismatch,
                 "attention layout");
    const std::size_t L = R / n_streams, dh = D / n_heads;
    const T inv = T{1} / std::sqrt(static_cast<T>(dh));
    // Blocks of rows that attend to each other.
    const std::size_t groups = mode == AttentionMode::kVanilla ? n_streams : 1;
    const std::size_t span = R / groups;

    Tensor<T> out({R, D});
    std::vector<kernels::RowMat<T>> probs;  // [head * groups + g] -> [span, span]
    probs.reserve(n_heads * groups);
    if (probe != nullptr) {
        probe->mass.emplace_back(Shape{n_streams, n_streams}, 0.0);
    }
    for (std::size_t h = 0; h < n_heads; ++h) {
        for (std::size_t g = 0; g < groups; ++g) {
            const std::size_t off = g * span * D + h * dh;
            auto qh = kernels::view(qv.data() + off, span, dh, D);
            auto kh = kernels::view(kv.data() + off, span, dh, D);
            auto vh = kernels::view(vv.data() + off, span, dh, D);
            kernels::RowMat<T> p(static_cast<kernels::Index>(span), static_cast<kernels::Index>(span));
            auto oh = kernels::view(out.data() + off, span, dh, D);
            constexpr std::size_t kChunk = 64;
            for (std::size_t r0 = 0; r0 < span; r0 += kChunk) {
                const auto rows = static_cast<kernels::Index>(std::min(kChunk, span - r0));
                const auto ri = static_cast<kernels::Index>(r0);
                auto pc = p.middleRows(ri, rows);
                pc.noalias() = (qh.middleRows(ri, rows) * inv) * kh.transpose();
                kernels::softmax_rows_inplace(pc.data(), static_cast<std::size_t>(rows), span);
                oh.middleRows(ri, rows).noalias() = pc * vh;
            }
            if (probe != nullptr) {
                Tensor<double>& m = probe->mass.back();
                const double norm = 1.0 / static_cast<double>(n_heads * L);
                for (std::size_t r = 0; r < span; ++r) {
                    const std::size_t si = (g * span + r) / L;
                    for (std::size_t c = 0; c < span; ++c) {
                        const std::size_t sj = (g * span + c) / L;
                        m[si * n_streams + sj] += static_cast<double>(p(static_cast<kernels::Index>(r),
                                                                        static_cast<kernels::Index>(c))) *
                                                  norm;
                    }
                }
            }
            probs.push_back(std::move(p));
        }
    }

    return tape.push(std::move(out), {q, k, v},
                     [q, k, v, n_heads, groups, span, D, dh, inv, probs = std::move(probs)](Tape<T>& tp,
                                                                                           std::size_t self) {
                         const Tensor<T>& g = tp.grad(Var{self});
                         const Tensor<T>& qv = tp.value(q);
                         const Tensor<T>& kv = tp.value(k);
                         const Tensor<T>& vv = tp.value(v);
                         T* gq = tp.requires_grad(q) ? tp.grad(q).data() : nullptr;
                         T* gk = tp.requires_grad(k) ? tp.grad(k).data() : nullptr;
                         T* gv = tp.requires_grad(v) ? tp.grad(v).data() : nullptr;
                         for (std::size_t h = 0; h < n_heads; ++h) {
                             for (std::size_t grp = 0; grp < groups; ++grp) {
                                 const std::size_t off = grp * span * D + h * dh;
                                 const kernels::RowMat<T>& p = probs[h * groups + grp];
                                 auto go = kernels::view(g.data() + off, span, dh, D);
                                 auto qh = kernels::view(qv.data() + off, span, dh, D);
                                 auto kh = kernels::view(kv.data() + off, span, dh, D);
                                 auto vh = kernels::view(vv.data() + off, span, dh, D);
                                 // Row chunks keep the dP block cache-resident.
                                 constexpr std::size_t kChunk = 64;
                                 for (std::size_t r0 = 0; r0 < span; r0 += kChunk) {
                                     const auto rows = static_cast<kernels::Index>(std::min(kChunk, span - r0));
                                     const auto ri = static_cast<kernels::Index>(r0);
                                     auto pc = p.middleRows(ri, rows);
                                     auto goc = go.middleRows(ri, rows);
                                     if (gv != nullptr) {
                                         kernels::view(gv + off, span, dh, D).noalias() += pc.transpose() * goc;
                                     }
                                     if (gq == nullptr && gk == nullptr) {
                                         continue;
                                     }
                                     kernels::RowMat<T> ds = goc * vh.transpose();  // dP
                                     for (kernels::Index r = 0; r < rows; ++r) {
                                         const T dot = ds.row(r).dot(pc.row(r));
                                         ds.row(r).array() = pc.row(r).array() * (ds.row(r).array() - dot) * inv;
                                     }
                                     if (gq != nullptr) {
                                         kernels::view(gq + off, span, dh, D).middleRows(ri, rows).noalias() += ds * kh;
                                     }
                                     if (gk != nullptr) {
                                         kernels::view(gk + off, span, dh, D).noalias() +=
                                             ds.transpose() * qh.middleRows(ri, rows);
                                     }
                                 }
                             }
                         }
                     });
}

}  // namespace ops
}  // namespace mmflow

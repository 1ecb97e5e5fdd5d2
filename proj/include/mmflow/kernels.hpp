// Copyright (C) 2026 The mmflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Value-level numeric kernels shared by the tape ops and the non-differentiable
// APIs. Dense products go through Eigen; everything else is plain loops.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>

#include <Eigen/Core>

#include "mmflow/tensor.hpp"

namespace mmflow::kernels {

using Index = Eigen::Index;

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using MatView = Eigen::Map<RowMat<T>, Eigen::Unaligned, Eigen::OuterStride<>>;

template <class T>
using ConstMatView = Eigen::Map<const RowMat<T>, Eigen::Unaligned, Eigen::OuterStride<>>;

template <class T>
MatView<T> view(T* p, std::size_t rows, std::size_t cols, std::size_t ld) {
    return MatView<T>(p, static_cast<Index>(rows), static_cast<Index>(cols), Eigen::OuterStride<>(static_cast<Index>(ld)));
}

template <class T>
ConstMatView<T> view(const T* p, std::size_t rows, std::size_t cols, std::size_t ld) {
    return ConstMatView<T>(p, static_cast<Index>(rows), static_cast<Index>(cols),
                           Eigen::OuterStride<>(static_cast<Index>(ld)));
}

template <class T>
MatView<T> view(Tensor<T>& t) {
    return view(t.data(), t.rows(), t.cols(), t.cols());
}

template <class T>
ConstMatView<T> view(const Tensor<T>& t) {
    return view(t.data(), t.rows(), t.cols(), t.cols());
}

/// Leading (batch) dims of a rank >= 2 tensor.
inline std::size_t batch_count(const Shape& s) {
    std::size_t b = 1;
    for (std::size_t i = 0; i + 2 < s.size(); ++i) {
        b *= s[i];
    }
    return b;
}

/// Batched contraction [.., m, k] x [.., k, n]. A rank-2 right operand is
/// broadcast over the left operand's batch.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    MMFLOW_CHECK(a.rank() >= 2 && b.rank() >= 2, ErrorCode::kShapeMismatch, "matmul needs rank >= 2");
    const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
    const std::size_t k2 = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
    MMFLOW_CHECK(k == k2, ErrorCode::kShapeMismatch,
                 "matmul inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const bool broadcast_b = b.rank() == 2;
    if (!broadcast_b) {
        MMFLOW_CHECK(a.rank() == b.rank() && std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()),
                     ErrorCode::kShapeMismatch,
                     "matmul batch dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    Shape out_shape(a.shape().begin(), a.shape().end() - 2);
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor<T> out(out_shape);
    const std::size_t batches = batch_count(a.shape());
    for (std::size_t i = 0; i < batches; ++i) {
        const T* bp = broadcast_b ? b.data() : b.data() + i * k * n;
        view(out.data() + i * m * n, m, n, n).noalias() = view(a.data() + i * m * k, m, k, k) * view(bp, k, n, n);
    }
    return out;
}

/// y = x W^T + b for x [N, d_in], W [d_out, d_in], b [d_out] (optional).
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b = nullptr) {
    MMFLOW_CHECK(w.rank() == 2 && x.cols() == w.dim(1), ErrorCode::kShapeMismatch,
                 "linear " + shape_str(x.shape()) + " with W " + shape_str(w.shape()));
    Shape s = x.shape();
    s.back() = w.dim(0);
    Tensor<T> out(s);
    auto o = view(out);
    o.noalias() = view(x) * view(w).transpose();
    if (b != nullptr) {
        MMFLOW_CHECK(b->size() == w.dim(0), ErrorCode::kShapeMismatch, "linear bias size");
        for (std::size_t r = 0; r < out.rows(); ++r) {
            T* row = out.data() + r * out.cols();
            for (std::size_t c = 0; c < out.cols(); ++c) {
                row[c] += (*b)[c];
            }
        }
    }
    return out;
}

/// Row-wise softmax over the last dim with max subtraction.
template <class T>
void softmax_rows_inplace(T* data, std::size_t rows, std::size_t cols) {
    auto m = view(data, rows, cols, cols);
    for (Index r = 0; r < m.rows(); ++r) {
        auto row = m.row(r).array();
        const T mx = row.maxCoeff();
        row = (row - mx).exp();
        row *= T{1} / row.sum();
    }
}

template <class T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
    Tensor<T> out = x;
    softmax_rows_inplace(out.data(), out.rows(), out.cols());
    return out;
}

/// Normalizes each row to zero mean / unit variance (biased), then applies
/// optional gain and bias.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>* gain = nullptr, const Tensor<T>* bias = nullptr,
                     T eps = T(1e-5)) {
    Tensor<T> out = x;
    const std::size_t d = x.cols();
    for (std::size_t r = 0; r < x.rows(); ++r) {
        T* row = out.data() + r * d;
        T mean{0};
        for (std::size_t c = 0; c < d; ++c) {
            mean += row[c];
        }
        mean /= static_cast<T>(d);
        T var{0};
        for (std::size_t c = 0; c < d; ++c) {
            const T z = row[c] - mean;
            var += z * z;
        }
        var /= static_cast<T>(d);
        const T rstd = T{1} / std::sqrt(var + eps);
        for (std::size_t c = 0; c < d; ++c) {
            T y = (row[c] - mean) * rstd;
            if (gain != nullptr) {
                y *= (*gain)[c];
            }
            if (bias != nullptr) {
                y += (*bias)[c];
            }
            row[c] = y;
        }
    }
    return out;
}

/// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <class T>
T gelu(T x) {
    const T k = static_cast<T>(std::numbers::sqrt2 / std::sqrt(std::numbers::pi));
    return T(0.5) * x * (T{1} + std::tanh(k * (x + T(0.044715) * x * x * x)));
}

template <class T>
T gelu_grad(T x) {
    const T k = static_cast<T>(std::numbers::sqrt2 / std::sqrt(std::numbers::pi));
    const T u = k * (x + T(0.044715) * x * x * x);
    const T th = std::tanh(u);
    const T du = k * (T{1} + T(3 * 0.044715) * x * x);
    return T(0.5) * (T{1} + th) + T(0.5) * x * (T{1} - th * th) * du;
}

template <class T>
T sigmoid(T x) {
    return T{1} / (T{1} + std::exp(-x));
}

// Vectorized forms of the two scalar rules above (Eigen's packet tanh).
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
    const T k = static_cast<T>(std::numbers::sqrt2 / std::sqrt(std::numbers::pi));
    Tensor<T> out(x.shape());
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    const Eigen::Map<const Arr> xv(x.data(), static_cast<Eigen::Index>(x.size()));
    Eigen::Map<Arr> ov(out.data(), static_cast<Eigen::Index>(out.size()));
    const Arr th = (k * (xv + T(0.044715) * xv * xv * xv)).tanh();
    ov = T(0.5) * xv * (T{1} + th);
    return out;
}

/// gx += g * gelu'(x) * factor, elementwise.
template <class T>
void gelu_backward_acc(const Tensor<T>& x, const Tensor<T>& g, Tensor<T>& gx, T factor) {
    const T k = static_cast<T>(std::numbers::sqrt2 / std::sqrt(std::numbers::pi));
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    const auto n = static_cast<Eigen::Index>(x.size());
    const Eigen::Map<const Arr> xv(x.data(), n);
    const Eigen::Map<const Arr> gv(g.data(), n);
    Eigen::Map<Arr> out(gx.data(), n);
    const Arr th = (k * (xv + T(0.044715) * xv * xv * xv)).tanh();
    const Arr du = k * (T{1} + T(3 * 0.044715) * xv * xv);
    out += gv * (T(0.5) * (T{1} + th) + T(0.5) * xv * (T{1} - th * th) * du) * factor;
}

template <class T>
Tensor<T> embed_lookup(const Tensor<T>& table, std::size_t index) {
    MMFLOW_CHECK(table.rank() == 2, ErrorCode::kShapeMismatch, "embedding table must be rank 2");
    MMFLOW_CHECK(index < table.dim(0), ErrorCode::kIndexOutOfBounds,
                 "row " + std::to_string(index) + " of " + std::to_string(table.dim(0)));
    const std::size_t d = table.dim(1);
    return Tensor<T>({d}, std::vector<T>(table.data() + index * d, table.data() + (index + 1) * d));
}

/// Sinusoidal embedding of a scalar (flow time scaled by 1000).
template <class T>
Tensor<T> timestep_embedding(double t, std::size_t dim) {
    Tensor<T> out({dim});
    const std::size_t half = dim / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        const double arg = 1000.0 * t * freq;
        out[i] = static_cast<T>(std::cos(arg));
        out[i + half] = static_cast<T>(std::sin(arg));
    }
    return out;
}

template <class T>
bool all_finite(const Tensor<T>& t) {
    return std::all_of(t.values().begin(), t.values().end(), [](T v) { return std::isfinite(v); });
}

}  // namespace mmflow::kernels

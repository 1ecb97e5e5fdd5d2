// Copyright (C) 2026 The mmflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Differentiable ops over Tape. Each op computes its value with the kernels
// and records a hand-derived backward rule.

#include <cmath>
#include <vector>

#include "mmflow/kernels.hpp"
#include "mmflow/tape.hpp"

namespace mmflow::ops {

template <class T>
Var matmul(Tape<T>& tape, Var a, Var b) {
    Tensor<T> out = kernels::matmul(tape.value(a), tape.value(b));
    return tape.push(std::move(out), {a, b}, [a, b](Tape<T>& tp, std::size_t self) {
        const Tensor<T>& av = tp.value(a);
        const Tensor<T>& bv = tp.value(b);
        const Tensor<T>& g = tp.grad(Var{self});
        const std::size_t m = av.dim(av.rank() - 2), k = av.dim(av.rank() - 1), n = bv.dim(bv.rank() - 1);
        const std::size_t batches = kernels::batch_count(av.shape());
        const bool broadcast_b = bv.rank() == 2;
        for (std::size_t i = 0; i < batches; ++i) {
            auto gi = kernels::view(g.data() + i * m * n, m, n, n);
            const std::size_t boff = broadcast_b ? 0 : i * k * n;
            if (tp.requires_grad(a)) {
                Tensor<T>& ga = tp.grad(a);
                kernels::view(ga.data() + i * m * k, m, k, k).noalias() +=
                    gi * kernels::view(bv.data() + boff, k, n, n).transpose();
            }
            if (tp.requires_grad(b)) {
                Tensor<T>& gb = tp.grad(b);
                kernels::view(gb.data() + boff, k, n, n).noalias() +=
                    kernels::view(av.data() + i * m * k, m, k, k).transpose() * gi;
            }
        }
    });
}

/// y = x W^T + b. `b` may be an invalid Var for no bias.
template <class T>
Var linear(Tape<T>& tape, Var x, Var w, Var b = {}) {
    Tensor<T> out = kernels::linear(tape.value(x), tape.value(w), b.valid() ? &tape.value(b) : nullptr);
    std::vector<Var> inputs{x, w};
    if (b.valid()) {
        inputs.push_back(b);
    }
    return tape.push(std::move(out), inputs, [x, w, b](Tape<T>& tp, std::size_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        auto gv = kernels::view(g);
        if (tp.requires_grad(x)) {
            kernels::view(tp.grad(x)).noalias() += gv * kernels::view(tp.value(w));
        }
        if (tp.requires_grad(w)) {
            kernels::view(tp.grad(w)).noalias() += gv.transpose() * kernels::view(tp.value(x));
        }
        if (b.valid() && tp.requires_grad(b)) {
            Tensor<T>& gb = tp.grad(b);
            for (std::size_t r = 0; r < g.rows(); ++r) {
                for (std::size_t c = 0; c < g.cols(); ++c) {
                    gb[c] += g[r * g.cols() + c];
                }
            }
        }
    });
}

template <class T>
Var add(Tape<T>& tape, Var a, Var b) {
    const Tensor<T>& av = tape.value(a);
    const Tensor<T>& bv = tape.value(b);
    require_same_shape(av, bv, "add");
    Tensor<T> out = av;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += bv[i];
    }
    return tape.push(std::move(out), {a, b}, [a, b](Tape<T>& tp, std::size_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        for (Var v : {a, b}) {
            if (tp.requires_grad(v)) {
                Tensor<T>& gv = tp.grad(v);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    gv[i] += g[i];
                }
            }
        }
    });
}

template <class T>
Var mul(Tape<T>& tape, Var a, Var b) {
    const Tensor<T>& av = tape.value(a);
    const Tensor<T>& bv = tape.value(b);
    require_same_shape(av, bv, "mul");
    Tensor<T> out = av;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] *= bv[i];
    }
    return tape.push(std::move(out), {a, b}, [a, b](Tape<T>& tp, std::size_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        if (tp.requires_grad(a)) {
            Tensor<T>& ga = tp.grad(a);
            const Tensor<T>& bv = tp.value(b);
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i] * bv[i];
            }
        }
        if (tp.requires_grad(b)) {
            Tensor<T>& gb = tp.grad(b);
            const Tensor<T>& av = tp.value(a);
            for (std::size_t i = 0; i < g.size(); ++i) {
                gb[i] += g[i] * av[i];
            }
        }
    });
}

template <class T>
Var scale(Tape<T>& tape, Var a, T s) {
    Tensor<T> out = tape.value(a);
    for (T& v : out.values()) {
        v *= s;
    }
    return tape.push(std::move(out), {a}, [a, s](Tape<T>& tp, std::size_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        Tensor<T>& ga = tp.grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += s * g[i];
        }
    });
}

/// x [R, d] + y [Ry, d] where row r of x uses row (r mod Ry) of y.
template <class T>
Var add_tiled(Tape<T>& tape, Var x, Var y) {
    const Tensor<T>& xv = tape.value(x);
    const Tensor<T>& yv = tape.value(y);
    MMFLOW_CHECK(xv.cols() == yv.cols() && xv.rows() % yv.rows() == 0, ErrorCode::kShapeMismatch,
                 "add_tiled " + shape_str(xv.shape()) + " + " + shape_str(yv.shape()));
    Tensor<T> out = xv;
    const std::size_t d = xv.cols(), ry = yv.rows();
    for (std::size_t r = 0; r < xv.rows(); ++r) {
        for (std::size_t c = 0; c < d; ++c) {
            out[r * d + c] += yv[(r % ry) * d + c];
        }
    }
    return tape.push(std::move(out), {x, y}, [x, y, d, ry](Tape<T>& tp, std::size_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        if (tp.requires_grad(x)) {
            Tensor<T>& gx = tp.grad(x);
            for (std::size_t i = 0; i < g.size(); ++i) {
                gx[i] += g[i];
            }
        }
        if (tp.requires_grad(y)) {
            Tensor<T>& gy = tp.grad(y);
            for (std::size_t r = 0; r < g.rows(); ++r) {
                for (std::size_t c = 0; c < d; ++c) {
                    gy[(r % ry) * d + c] += g[r * d + c];
                }
            }
        }
    });
}

/// Row r of x [R, d] uses row r / (R / G) of a group tensor [G, d].
inline std::size_t group_of(std::size_t r, std::size_t rows, std::size_t groups) { return r / (rows / groups); }

/// Block-broadcast AdaLN modulation: x * (1 + scale) + shift.
template <class T>
Var modulate(Tape<T>& tape, Var x, Var shift, Var scl) {
    const Tensor<T>& xv = tape.value(x);
    const Tensor<T>& sh = tape.value(shift);
    const Tensor<T>& sc = tape.value(scl);
    const std::size_t R = xv.rows(), d = xv.cols(), G = sh.rows();
    MMFLOW_CHECK(sh.shape() == sc.shape() && sh.cols() == d && R % G == 0, ErrorCode::kShapeMismatch,
                 "modulate " + shape_str(xv.shape()) + " by " + shape_str(sh.shape()));
    Tensor<T> out = xv;
    for (std::size_t r = 0; r < R; ++r) {
        const std::size_t g = group_of(r, R, G);
        for (std::size_t c = 0; c < d; ++c) {
            out[r * d + c] = xv[r * d + c] * (T{1} + sc[g * d + c]) + sh[g * d + c];
        }
    }
    return tape.push(std::move(out), {x, shift, scl}, [x, shift, scl, R, d, G](Tape<T>& tp, std::size_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        const Tensor<T>& xv = tp.value(x);
        const Tensor<T>& sc = tp.value(scl);
        if (tp.requires_grad(x)) {
            Tensor<T>& gx = tp.grad(x);
            for (std::size_t r = 0; r < R; ++r) {
                const std::size_t grp = group_of(r, R, G);
                for (std::size_t c = 0; c < d; ++c) {
                    gx[r * d + c] += g[r * d + c] * (T{1} + sc[grp * d + c]);
                }
            }
        }
        if (tp.requires_grad(shift)) {
            Tensor<T>& gs = tp.grad(shift);
            for (std::size_t r = 0; r < R; ++r) {
                const std::size_t grp = group_of(r, R, G);
                for (std::size_t c = 0; c < d; ++c) {
                    gs[grp * d + c] += g[r * d + c];
                }
            }
        }
        if (tp.requires_grad(scl)) {
            Tensor<T>& gc = tp.grad(scl);
            for (std::size_t r = 0; r < R; ++r) {
                const std::size_t grp = group_of(r, R, G);
                for (std::size_t c = 0; c < d; ++c) {
                    gc[grp * d + c] += g[r * d + c] * xv[r * d + c];
                }
            }
        }
    });
}

/// Block-broadcast gated residual: x + gate * y.
template <class T>
Var gated_residual(Tape<T>& tape, Var x, Var y, Var gate) {
    const Tensor<T>& xv = tape.value(x);
    const Tensor<T>& yv = tape.value(y);
    const Tensor<T>& gv = tape.value(gate);
    require_same_shape(xv, yv, "gated_residual");
    const std::size_t R = xv.rows(), d = xv.cols(), G = gv.rows();
    MMFLOW_CHECK(gv.cols() == d && R % G == 0, ErrorCode::kShapeMismatch, "gated_residual gate shape");
    Tensor<T> out = xv;
    for (std::size_t r = 0; r < R; ++r) {
        const std::size_t grp = group_of(r, R, G);
        for (std::size_t c = 0; c < d; ++c) {
            out[r * d + c] += gv[grp * d + c] * yv[r * d + c];
        }
    }
    return tape.push(std::move(out), {x, y, gate}, [x, y, gate, R, d, G](Tape<T>& tp, std::size_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        if (tp.requires_grad(x)) {
            Tensor<T>& gx = tp.grad(x);
            for (std::size_t i = 0; i < g.size(); ++i) {
                gx[i] += g[i];
            }
        }
        const Tensor<T>& yv = tp.value(y);
        const Tensor<T>& gv = tp.value(gate);
        if (tp.requires_grad(y)) {
            Tensor<T>& gy = tp.grad(y);
            for (std::size_t r = 0; r < R; ++r) {
                const std::size_t grp = group_of(r, R, G);
                for (std::size_t c = 0; c < d; ++c) {
                    gy[r * d + c] += g[r * d + c] * gv[grp * d + c];
                }
            }
        }
        if (tp.requires_grad(gate)) {
            Tensor<T>& gg = tp.grad(gate);
            for (std::size_t r = 0; r < R; ++r) {
                const std::size_t grp = group_of(r, R, G);
                for (std::size_t c = 0; c < d; ++c) {
                    gg[grp * d + c] += g[r * d + c] * yv[r * d + c];
                }
            }
        }
    });
}

/// Layer norm over the last dim; gain and bias are optional Vars.
template <class T>
Var layer_norm(Tape<T>& tape, Var x, Var gain = {}, Var bias = {}, T eps = T(1e-5)) {
    const Tensor<T>& xv = tape.value(x);
    const std::size_t R = xv.rows(), d = xv.cols();
    Tensor<T> normed = kernels::layer_norm(xv, static_cast<const Tensor<T>*>(nullptr),
                                           static_cast<const Tensor<T>*>(nullptr), eps);
    std::vector<T> rstd(R);
    for (std::size_t r = 0; r < R; ++r) {
        T mean{0}, var{0};
        for (std::size_t c = 0; c < d; ++c) {
            mean += xv[r * d + c];
        }
        mean /= static_cast<T>(d);
        for (std::size_t c = 0; c < d; ++c) {
            const T z = xv[r * d + c] - mean;
            var += z * z;
        }
        var /= static_cast<T>(d);
        rstd[r] = T{1} / std::sqrt(var + eps);
    }
    Tensor<T> out = normed;
    if (gain.valid() || bias.valid()) {
        for (std::size_t r = 0; r < R; ++r) {
            for (std::size_t c = 0; c < d; ++c) {
                T v = normed[r * d + c];
                if (gain.valid()) {
                    v *= tape.value(gain)[c];
                }
                if (bias.valid()) {
                    v += tape.value(bias)[c];
                }
                out[r * d + c] = v;
            }
        }
    }
    std::vector<Var> inputs{x};
    if (gain.valid()) {
        inputs.push_back(gain);
    }
    if (bias.valid()) {
        inputs.push_back(bias);
    }
    return tape.push(std::move(out), inputs,
                     [x, gain, bias, R, d, normed = std::move(normed), rstd = std::move(rstd)](Tape<T>& tp,
                                                                                               std::size_t self) {
                         const Tensor<T>& g = tp.grad(Var{self});
                         if (gain.valid() && tp.requires_grad(gain)) {
                             Tensor<T>& gg = tp.grad(gain);
                             for (std::size_t i = 0; i < g.size(); ++i) {
                                 gg[i % d] += g[i] * normed[i];
                             }
                         }
                         if (bias.valid() && tp.requires_grad(bias)) {
                             Tensor<T>& gb = tp.grad(bias);
                             for (std::size_t i = 0; i < g.size(); ++i) {
                                 gb[i % d] += g[i];
                             }
                         }
                         if (!tp.requires_grad(x)) {
                             return;
                         }
                         Tensor<T>& gx = tp.grad(x);
                         std::vector<T> dy(d);
                         for (std::size_t r = 0; r < R; ++r) {
                             T mean_dy{0}, mean_dyy{0};
                             for (std::size_t c = 0; c < d; ++c) {
                                 T v = g[r * d + c];
                                 if (gain.valid()) {
                                     v *= tp.value(gain)[c];
                                 }
                                 dy[c] = v;
                                 mean_dy += v;
                                 mean_dyy += v * normed[r * d + c];
                             }
                             mean_dy /= static_cast<T>(d);
                             mean_dyy /= static_cast<T>(d);
                             for (std::size_t c = 0; c < d; ++c) {
                                 gx[r * d + c] += rstd[r] * (dy[c] - mean_dy - normed[r * d + c] * mean_dyy);
                             }
                         }
                     });
}

template <class T>
Var gelu(Tape<T>& tape, Var x) {
    Tensor<T> out = kernels::gelu(tape.value(x));
    return tape.push(std::move(out), {x}, [x](Tape<T>& tp, std::size_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        const Tensor<T>& xv = tp.value(x);
        Tensor<T>& gx = tp.grad(x);
        const T fault = fault_injection::corrupt_gelu_backward ? T(1.5) : T(1);
        kernels::gelu_backward_acc(xv, g, gx, fault);
    });
}

template <class T>
Var silu(Tape<T>& tape, Var x) {
    Tensor<T> out = tape.value(x);
    for (T& v : out.values()) {
        v = v * kernels::sigmoid(v);
    }
    return tape.push(std::move(out), {x}, [x](Tape<T>& tp, std::size_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        const Tensor<T>& xv = tp.value(x);
        Tensor<T>& gx = tp.grad(x);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T s = kernels::sigmoid(xv[i]);
            gx[i] += g[i] * (s + xv[i] * s * (T{1} - s));
        }
    });
}

template <class T>
Var softmax_lastdim(Tape<T>& tape, Var x) {
    Tensor<T> out = kernels::softmax_lastdim(tape.value(x));
    return tape.push(std::move(out), {x}, [x](Tape<T>& tp, std::size_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        const Tensor<T>& y = tp.value(Var{self});
        Tensor<T>& gx = tp.grad(x);
        const std::size_t d = y.cols();
        for (std::size_t r = 0; r < y.rows(); ++r) {
            T dot{0};
            for (std::size_t c = 0; c < d; ++c) {
                dot += g[r * d + c] * y[r * d + c];
            }
            for (std::size_t c = 0; c < d; ++c) {
                gx[r * d + c] += y[r * d + c] * (g[r * d + c] - dot);
            }
        }
    });
}

/// Row `index` of an embedding table, as a rank-1 tensor.
template <class T>
Var embed_lookup(Tape<T>& tape, Var table, std::size_t index) {
    Tensor<T> out = kernels::embed_lookup(tape.value(table), index);
    return tape.push(std::move(out), {table}, [table, index](Tape<T>& tp, std::size_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        Tensor<T>& gt = tp.grad(table);
        const std::size_t d = g.size();
        for (std::size_t c = 0; c < d; ++c) {
            gt[index * d + c] += g[c];
        }
    });
}

/// Columns [start, start+len) of x [R, C].
template <class T>
Var slice_cols(Tape<T>& tape, Var x, std::size_t start, std::size_t len) {
    const Tensor<T>& xv = tape.value(x);
    const std::size_t R = xv.rows(), C = xv.cols();
    MMFLOW_CHECK(start + len <= C, ErrorCode::kShapeMismatch, "slice_cols out of range");
    Tensor<T> out({R, len});
    for (std::size_t r = 0; r < R; ++r) {
        std::copy_n(xv.data() + r * C + start, len, out.data() + r * len);
    }
    return tape.push(std::move(out), {x}, [x, start, len, R, C](Tape<T>& tp, std::size_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        Tensor<T>& gx = tp.grad(x);
        for (std::size_t r = 0; r < R; ++r) {
            for (std::size_t c = 0; c < len; ++c) {
                gx[r * C + start + c] += g[r * len + c];
            }
        }
    });
}

/// Reshape without data movement.
template <class T>
Var reshape(Tape<T>& tape, Var x, Shape shape) {
    Tensor<T> out = tape.value(x).reshaped(std::move(shape));
    return tape.push(std::move(out), {x}, [x](Tape<T>& tp, std::size_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        Tensor<T>& gx = tp.grad(x);
        for (std::size_t i = 0; i < g.size(); ++i) {
            gx[i] += g[i];
        }
    });
}

template <class T>
Var sum(Tape<T>& tape, Var x) {
    T s{0};
    for (T v : tape.value(x).values()) {
        s += v;
    }
    return tape.push(Tensor<T>({1}, std::vector<T>{s}), {x}, [x](Tape<T>& tp, std::size_t self) {
        const T g = tp.grad(Var{self})[0];
        for (T& v : tp.grad(x).values()) {
            v += g;
        }
    });
}

/// Mean of (pred - target)^2 over the rows whose flag is set. `target` is a
/// constant; rows without the flag receive exactly zero gradient.
template <class T>
Var masked_mse(Tape<T>& tape, Var pred, const Tensor<T>& target, const std::vector<bool>& row_mask) {
    const Tensor<T>& pv = tape.value(pred);
    require_same_shape(pv, target, "masked_mse");
    MMFLOW_CHECK(row_mask.size() == pv.rows(), ErrorCode::kShapeMismatch, "masked_mse row mask size");
    const std::size_t d = pv.cols();
    std::size_t count = 0;
    T acc{0};
    for (std::size_t r = 0; r < pv.rows(); ++r) {
        if (!row_mask[r]) {
            continue;
        }
        for (std::size_t c = 0; c < d; ++c) {
            const T diff = pv[r * d + c] - target[r * d + c];
            acc += diff * diff;
        }
        count += d;
    }
    MMFLOW_CHECK(count > 0, ErrorCode::kEmptyTargets, "masked_mse over no rows");
    const T inv = T{1} / static_cast<T>(count);
    return tape.push(Tensor<T>({1}, std::vector<T>{acc * inv}), {pred},
                     [pred, target, row_mask, d, inv](Tape<T>& tp, std::size_t self) {
                         const T g = tp.grad(Var{self})[0];
                         const Tensor<T>& pv = tp.value(pred);
                         Tensor<T>& gp = tp.grad(pred);
                         for (std::size_t r = 0; r < pv.rows(); ++r) {
                             if (!row_mask[r]) {
                                 continue;
                             }
                             for (std::size_t c = 0; c < d; ++c) {
                                 gp[r * d + c] += g * T{2} * inv * (pv[r * d + c] - target[r * d + c]);
                             }
                         }
                     });
}

}  // namespace mmflow::ops

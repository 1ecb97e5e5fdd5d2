// Copyright (C) 2026 The mmflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "mmflow/rng.hpp"
#include "mmflow/tape.hpp"

namespace mmflow {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t coords_checked = 0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    /// Largest |analytic| seen; zero means every checked gradient vanished.
    double max_abs_grad = 0.0;
};

struct GradCheckOptions {
    double h = 1e-4;
    /// Coordinates sampled per trainable parameter (all if the tensor is smaller).
    std::size_t samples_per_param = 8;
    std::uint64_t seed = 0;
};

/// Compares tape gradients against central differences
///   |analytic - cd| / max(|analytic|, |cd|, 1e-8)
/// over sampled coordinates of every trainable parameter. `build_loss` records
/// a scalar loss on the given tape from the current parameter values and must
/// be deterministic.
template <class BuildLoss>
GradCheckReport grad_check(BuildLoss&& build_loss, const std::vector<Parameter<double>*>& params,
                           const GradCheckOptions& opt = {}) {
    for (auto* p : params) {
        p->zero_grad();
    }
    {
        Tape<double> tape;
        const Var loss = build_loss(tape);
        MMFLOW_CHECK(std::isfinite(tape.value(loss)[0]), ErrorCode::kNonfiniteLoss, "loss is not finite");
        tape.backward(loss);
    }
    auto eval = [&build_loss]() {
        Tape<double> tape;
        const double v = tape.value(build_loss(tape))[0];
        MMFLOW_CHECK(std::isfinite(v), ErrorCode::kNonfiniteLoss, "perturbed loss is not finite");
        return v;
    };

    GradCheckReport report;
    Rng rng(opt.seed);
    for (auto* p : params) {
        if (!p->trainable) {
            continue;
        }
        const std::size_t n = p->value.size();
        std::vector<std::size_t> coords(n);
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (n > opt.samples_per_param) {
            for (std::size_t i = 0; i < opt.samples_per_param; ++i) {
                std::swap(coords[i], coords[i + rng.below(n - i)]);
            }
            coords.resize(opt.samples_per_param);
        }
        for (std::size_t idx : coords) {
            const double analytic = p->grad.empty() ? 0.0 : p->grad[idx];
            const double saved = p->value[idx];
            p->value[idx] = saved + opt.h;
            const double fp = eval();
            p->value[idx] = saved - opt.h;
            const double fm = eval();
            p->value[idx] = saved;
            const double numeric = (fp - fm) / (2.0 * opt.h);
            const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
            const double rel = std::abs(analytic - numeric) / denom;
            ++report.coords_checked;
            report.max_abs_grad = std::max(report.max_abs_grad, std::abs(analytic));
            if (rel > report.max_rel_error || report.coords_checked == 1) {
                report.max_rel_error = std::max(report.max_rel_error, rel);
                report.worst_param = p->name;
                report.worst_index = idx;
                report.worst_analytic = analytic;
                report.worst_numeric = numeric;
            }
        }
    }
    return report;
}

}  // namespace mmflow

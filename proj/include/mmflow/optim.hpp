// Copyright (C) 2026 The mmflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "mmflow/tape.hpp"

namespace mmflow {

/// Cosine annealing from lr_init at step 0 to lr_final at step total-1.
inline double cosine_lr(int step, int total, double lr_init, double lr_final) {
    if (total <= 1) {
        return lr_init;
    }
    const double frac = static_cast<double>(step) / static_cast<double>(total - 1);
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + std::cos(std::numbers::pi * frac));
}

struct AdamWOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-2;
};

/// Decoupled-weight-decay Adam. Parameters that received no gradient in the
/// current step (not touched by any backward pass) are skipped entirely,
/// including weight decay, so gated-off adapters stay bit-identical.
template <class T>
class AdamW {
public:
    explicit AdamW(AdamWOptions opt = {}) : opt_(opt) {}

    void step(const std::vector<Parameter<T>*>& params, double lr) {
        for (Parameter<T>* p : params) {
            if (!p->trainable || !p->touched || p->grad.empty()) {
                continue;
            }
            State& s = state_[p->name];
            if (s.m.empty()) {
                s.m = Tensor<double>(p->value.shape());
                s.v = Tensor<double>(p->value.shape());
            }
            ++s.t;
            const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(s.t));
            const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(s.t));
            const double decay = 1.0 - lr * opt_.weight_decay;
            for (std::size_t i = 0; i < p->value.size(); ++i) {
                const double g = static_cast<double>(p->grad[i]);
                s.m[i] = opt_.beta1 * s.m[i] + (1.0 - opt_.beta1) * g;
                s.v[i] = opt_.beta2 * s.v[i] + (1.0 - opt_.beta2) * g * g;
                const double mhat = s.m[i] / bc1;
                const double vhat = s.v[i] / bc2;
                double w = static_cast<double>(p->value[i]) * decay;
                w -= lr * mhat / (std::sqrt(vhat) + opt_.eps);
                p->value[i] = static_cast<T>(w);
            }
        }
    }

    long long steps_taken(const std::string& name) const {
        const auto it = state_.find(name);
        return it == state_.end() ? 0 : it->second.t;
    }

private:
    struct State {
        Tensor<double> m, v;
        long long t = 0;
    };

    AdamWOptions opt_;
    std::map<std::string, State> state_;
};

}  // namespace mmflow

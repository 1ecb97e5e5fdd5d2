// Copyright (C) 2026 The mmflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "mmflow/tensor.hpp"

namespace mmflow {

/// A named model tensor with its gradient accumulator.
template <class T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    bool trainable = true;
    /// Set when a backward pass wrote into `grad` since the last zero_grad().
    bool touched = false;

    Parameter() = default;
    Parameter(std::string n, Tensor<T> v, bool train = true)
        : name(std::move(n)), value(std::move(v)), trainable(train) {}

    void zero_grad() {
        grad = Tensor<T>();
        touched = false;
    }
};

struct Var {
    static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
    std::size_t id = kNone;

    bool valid() const noexcept { return id != kNone; }
};

/// Reverse-mode gradient tape. Nodes are recorded in evaluation order;
/// backward() walks them in reverse and each node pushes its output gradient
/// into its inputs. Gradients of parameter leaves land directly in
/// Parameter::grad, so several tapes can accumulate into one model.
template <class T>
class Tape {
public:
    using Backward = std::function<void(Tape&, std::size_t)>;

    /// With `grad_enabled` false nothing requires a gradient and no backward
    /// closures are stored (inference).
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) { nodes_.reserve(512); }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor<T> value) { return push_leaf(std::move(value), nullptr, false); }

    /// Leaf referring to a parameter. The parameter must outlive the tape.
    Var param(Parameter<T>& p) {
        Node n;
        n.ref = &p.value;
        n.param = &p;
        n.requires_grad = grad_enabled_ && p.trainable;
        nodes_.push_back(std::move(n));
        return Var{nodes_.size() - 1};
    }

    /// Records an op output. `backward` runs only if some input needs a gradient.
    Var push(Tensor<T> value, std::initializer_list<Var> inputs, Backward backward) {
        bool rg = false;
        for (Var v : inputs) {
            rg = rg || nodes_.at(v.id).requires_grad;
        }
        Node n;
        n.value = std::move(value);
        n.requires_grad = rg;
        if (rg) {
            n.backward = std::move(backward);
        }
        nodes_.push_back(std::move(n));
        return Var{nodes_.size() - 1};
    }

    /// Variant of push() for ops with a runtime-sized input list.
    Var push(Tensor<T> value, const std::vector<Var>& inputs, Backward backward) {
        bool rg = false;
        for (Var v : inputs) {
            rg = rg || nodes_.at(v.id).requires_grad;
        }
        Node n;
        n.value = std::move(value);
        n.requires_grad = rg;
        if (rg) {
            n.backward = std::move(backward);
        }
        nodes_.push_back(std::move(n));
        return Var{nodes_.size() - 1};
    }

    const Tensor<T>& value(Var v) const {
        const Node& n = nodes_.at(v.id);
        return n.ref ? *n.ref : n.value;
    }

    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

    /// Gradient accumulator of `v`, zero-initialized on first access.
    Tensor<T>& grad(Var v) {
        Node& n = nodes_.at(v.id);
        Tensor<T>& g = n.param ? n.param->grad : n.grad;
        const Tensor<T>& val = n.ref ? *n.ref : n.value;
        if (g.shape() != val.shape()) {
            g = Tensor<T>(val.shape(), T{0});
        }
        if (n.param) {
            n.param->touched = true;
        }
        return g;
    }

    bool has_grad(std::size_t id) const {
        const Node& n = nodes_[id];
        return n.param ? false : !n.grad.empty();
    }

    /// Back-propagates d(seed * loss) from a scalar node.
    void backward(Var loss, T seed = T{1}) {
        MMFLOW_CHECK(value(loss).size() == 1, ErrorCode::kShapeMismatch, "backward() needs a scalar loss");
        if (!nodes_.at(loss.id).requires_grad) {
            return;
        }
        grad(loss)[0] += seed;
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.backward && has_grad(i)) {
                n.backward(*this, i);
            }
        }
    }

    std::size_t size() const noexcept { return nodes_.size(); }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        const Tensor<T>* ref = nullptr;
        Parameter<T>* param = nullptr;
        bool requires_grad = false;
        Backward backward;
    };

    Var push_leaf(Tensor<T> value, Parameter<T>* p, bool rg) {
        Node n;
        n.value = std::move(value);
        n.param = p;
        n.requires_grad = rg;
        nodes_.push_back(std::move(n));
        return Var{nodes_.size() - 1};
    }

    std::vector<Node> nodes_;
    bool grad_enabled_ = true;
};

/// Switches for harness-sensitivity tests; never set outside tests.
namespace fault_injection {
inline bool corrupt_gelu_backward = false;
}

}  // namespace mmflow

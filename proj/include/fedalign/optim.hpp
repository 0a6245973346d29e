#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedalign/params.hpp"

namespace fedalign {

/// SGD with classic (heavy-ball, undampened) momentum.
struct OptimizerState {
    double learning_rate = 0.01;
    double momentum = 0.9;
    std::optional<double> clip_norm = 5.0;
    std::map<std::string, std::vector<double>> velocity;

    OptimizerState() = default;
    OptimizerState(double lr, double mom, std::optional<double> clip = 5.0)
        : learning_rate(lr), momentum(mom), clip_norm(clip) {
        require(lr >= 0.0, "learning rate must be non-negative");
        require(mom >= 0.0 && mom < 1.0, "momentum must lie in [0, 1)");
        require(!clip || *clip > 0.0, "clip norm must be positive");
    }

    void reset() { velocity.clear(); }
};

/// v <- momentum*v + g;  w <- w - lr*v
inline void sgd_update(std::span<double> w, std::span<const double> g, std::span<double> v, double lr,
                       double momentum) {
    require(w.size() == g.size() && w.size() == v.size(), "sgd_update: shape mismatch");
    for (std::size_t i = 0; i < w.size(); ++i) {
        v[i] = momentum * v[i] + g[i];
        w[i] -= lr * v[i];
    }
}

inline void sgd_step(ParamSet& params, OptimizerState& state) {
    for (const auto& [name, t] : params) {
        Tensor p = t;
        auto& v = state.velocity[name];
        if (v.empty()) {
            v.assign(p.numel(), 0.0);
        }
        require(v.size() == p.numel(), "sgd_step: velocity buffer for '" + name + "' has the wrong size");
        if (!p.has_grad()) {
            p.zero_grad();
        }
        sgd_update(p.mutable_values(), p.grad(), v, state.learning_rate, state.momentum);
    }
}

/// Scales the gradient group so its global L2 norm is at most max_norm.
/// Returns the scale applied (1 when unchanged).
inline double clip_grad_norm(std::span<const std::span<double>> grads, double max_norm) {
    require(max_norm > 0.0, "clip_grad_norm: max_norm must be positive");
    double sq = 0.0;
    for (auto g : grads)
        for (double x : g) {
            if (!std::isfinite(x)) {
                throw DivergenceError("clip_grad_norm: non-finite gradient component");
            }
            sq += x * x;
        }
    const double norm = std::sqrt(sq);
    if (norm <= max_norm) {
        return 1.0;
    }
    const double s = max_norm / norm;
    for (auto g : grads)
        for (double& x : g) x *= s;
    return s;
}

inline double clip_grad_norm(ParamSet& params, double max_norm) {
    std::vector<std::span<double>> views;
    for (const auto& [_, t] : params) {
        Tensor p = t;
        views.push_back(p.mutable_grad());
    }
    return clip_grad_norm(std::span<const std::span<double>>(views), max_norm);
}

} // namespace fedalign

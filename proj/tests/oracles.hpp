#pragma once

// Brute-force reference computations shared by the unit and acceptance tests.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "fedalign/params.hpp"
#include "fedalign/tensor.hpp"

namespace testing_oracles {

using fedalign::ParamSet;
using fedalign::Tensor;

inline double relative_error(double a, double b, double floor = 1e-6) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Largest relative error between backprop gradients and central differences.
/// Each element tries steps 1e-3 down to 1e-7 and keeps the best agreement:
/// small steps keep clear of nearby ReLU kinks, large ones keep round-off
/// below the floor where the true gradient is zero.
inline double max_gradient_error(std::vector<Tensor>& params, const std::function<Tensor()>& loss_fn,
                                 double floor = 1e-6) {
    for (auto& p : params) p.zero_grad();
    fedalign::backward(loss_fn());
    double worst = 0.0;
    for (auto& p : params) {
        const std::vector<double> g(p.grad().begin(), p.grad().end());
        auto vals = p.mutable_values();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double x0 = vals[i];
            double best = std::numeric_limits<double>::infinity();
            for (double h : {1e-5, 1e-6, 1e-7, 1e-4, 1e-3}) {
                vals[i] = x0 + h;
                const double up = loss_fn().item();
                vals[i] = x0 - h;
                const double down = loss_fn().item();
                vals[i] = x0;
                best = std::min(best, relative_error(g[i], (up - down) / (2.0 * h), floor));
                if (best <= 1e-6) break;
            }
            worst = std::max(worst, best);
        }
    }
    return worst;
}

/// Dense Hessian of a loss over a ParamSet by double central differences of
/// loss values, symmetrized.
inline Eigen::MatrixXd dense_hessian(ParamSet& params, const std::function<Tensor()>& loss_fn, double h = 1e-3) {
    const auto theta = params.to_vector().data;
    const std::size_t n = theta.size();
    auto f = [&](std::size_t i, double di, std::size_t j, double dj) {
        auto x = theta;
        x[i] += di;
        x[j] += dj;
        params.load_values(x);
        return loss_fn().item();
    };
    Eigen::MatrixXd H(n, n);
    const double f0 = f(0, 0.0, 0, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        H(i, i) = (f(i, h, i, h) - 2.0 * f0 + f(i, -h, i, -h)) / (4.0 * h * h);
        for (std::size_t j = 0; j < i; ++j) {
            const double v = (f(i, h, j, h) - f(i, h, j, -h) - f(i, -h, j, h) + f(i, -h, j, -h)) / (4.0 * h * h);
            H(i, j) = v;
            H(j, i) = v;
        }
    }
    params.load_values(theta);
    return H;
}

inline double sigma_max(const Eigen::MatrixXd& m) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
    return svd.singularValues()(0);
}

inline Eigen::MatrixXd to_eigen(const Tensor& t) {
    Eigen::MatrixXd m(t.dim(0), t.dim(1));
    for (std::size_t i = 0; i < t.dim(0); ++i)
        for (std::size_t j = 0; j < t.dim(1); ++j) m(i, j) = t.values()[i * t.dim(1) + j];
    return m;
}

} // namespace testing_oracles

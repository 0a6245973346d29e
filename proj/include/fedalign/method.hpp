#pragma once

#include <array>
#include <string>
#include <string_view>

#include "fedalign/tensor.hpp"

namespace fedalign {

enum class Method { fedavg, fedprox, moon, mixup, stochdepth, gradaug, fedalign };

inline constexpr std::array<Method, 7> all_methods = {Method::fedavg, Method::fedprox,  Method::moon,    Method::mixup,
                                                      Method::stochdepth, Method::gradaug, Method::fedalign};

inline std::string_view method_name(Method m) {
    switch (m) {
    case Method::fedavg: return "fedavg";
    case Method::fedprox: return "fedprox";
    case Method::moon: return "moon";
    case Method::mixup: return "mixup";
    case Method::stochdepth: return "stochdepth";
    case Method::gradaug: return "gradaug";
    case Method::fedalign: return "fedalign";
    }
    return "unknown";
}

inline Method parse_method(std::string_view name) {
    for (auto m : all_methods) {
        if (method_name(m) == name) return m;
    }
    throw ContractViolation("unknown method '" + std::string(name) + "'");
}

/// Local-training method selector and its hyperparameters.
struct MethodConfig {
    Method method = Method::fedavg;
    double mu = 0.0;          // weight of the method's extra loss term
    double gamma = 0.1;       // Mixup Beta(gamma, gamma)
    double gamma_L = 0.9;     // stochastic depth keep probability of the last block
    double omega_b = 0.8;     // GradAug sub-network width lower bound
    int n_subnets = 2;        // GradAug sub-networks per step
    double omega_S = 0.25;    // FedAlign sub-block width
    double tau = 0.5;         // MOON temperature
    int power_iters = 20;     // spectral-norm power iterations
    double lip_epsilon = 1e-8; // skip the Lipschitz term below this magnitude

    /// Operating points used throughout the experiments.
    static MethodConfig defaults(Method m) {
        MethodConfig c;
        c.method = m;
        switch (m) {
        case Method::fedprox: c.mu = 1e-4; break;
        case Method::moon: c.mu = 1.0; break;
        case Method::gradaug: c.mu = 1.75; break;
        case Method::fedalign: c.mu = 0.45; break;
        default: break;
        }
        return c;
    }

    void validate() const {
        require(mu >= 0.0, "mu must be non-negative");
        require(gamma > 0.0, "mixup gamma must be positive");
        require(gamma_L > 0.0 && gamma_L <= 1.0, "gamma_L must lie in (0, 1]");
        require(omega_b > 0.0 && omega_b <= 1.0, "omega_b must lie in (0, 1]");
        require(omega_S > 0.0 && omega_S <= 1.0, "omega_S must lie in (0, 1]");
        require(tau > 0.0, "tau must be positive");
        require(n_subnets >= 1, "n_subnets must be at least 1");
        require(power_iters >= 1, "power_iters must be at least 1");
        require(lip_epsilon >= 0.0, "lip_epsilon must be non-negative");
    }
};

} // namespace fedalign

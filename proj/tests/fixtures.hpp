#pragma once

// Small smooth models shared by the unit and acceptance tests.

#include <vector>

#include "fedalign/ops.hpp"
#include "fedalign/params.hpp"
#include "fedalign/rng.hpp"

namespace testing_fixtures {

using namespace fedalign;

/// Two-layer tanh MLP with a fixed batch; smooth, so finite-difference
/// Hessians are trustworthy.
struct TanhMlp {
    ParamSet params;
    Tensor x;
    std::vector<int> y;

    TanhMlp(std::size_t in, std::size_t hidden, std::size_t classes, std::size_t batch, std::uint64_t seed) {
        Rng rng = make_rng(seed);
        params.add("w1", Tensor::parameter({hidden, in}, normal_vector(rng, hidden * in, 0.8)));
        params.add("b1", Tensor::parameter({hidden}, normal_vector(rng, hidden, 0.2)));
        params.add("w2", Tensor::parameter({classes, hidden}, normal_vector(rng, classes * hidden, 0.8)));
        params.add("b2", Tensor::parameter({classes}, normal_vector(rng, classes, 0.2)));
        x = Tensor::constant({batch, in}, normal_vector(rng, batch * in));
        for (std::size_t i = 0; i < batch; ++i) y.push_back(static_cast<int>(rng() % classes));
    }

    Tensor operator()() const {
        const Tensor h = tanh(linear(x, params.at("w1"), params.at("b1")));
        return cross_entropy(linear(h, params.at("w2"), params.at("b2")), y);
    }
};

/// L = 1/2 theta^T A theta for a symmetric A (row-major n x n).
struct Quadratic {
    ParamSet params;
    Tensor a;

    Quadratic(std::vector<double> A, std::vector<double> theta0) {
        const std::size_t n = theta0.size();
        params.add("theta", Tensor::parameter({1, n}, std::move(theta0)));
        a = Tensor::constant({n, n}, std::move(A));
    }

    Tensor operator()() const {
        const Tensor& t = params.at("theta");
        return scale(sum(mul(matmul(t, a), t)), 0.5);
    }
};

} // namespace testing_fixtures

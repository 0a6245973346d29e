#pragma once

// Local objectives of every supported method, the transmitting matrices and
// the power-iteration spectral norm.

#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "fedalign/blocknet.hpp"
#include "fedalign/data.hpp"
#include "fedalign/method.hpp"
#include "fedalign/ops.hpp"
#include "fedalign/params.hpp"
#include "fedalign/rng.hpp"

namespace fedalign {

inline Tensor loss_ce(const Tensor& logits, std::span<const int> labels) { return cross_entropy(logits, labels); }

/// base + (mu / 2) * ||theta - w_t||^2 over the whole parameter vector.
inline Tensor loss_fedprox(const Tensor& base_loss, const ParamSet& theta, const ParamVector& w_t, double mu) {
    require(theta.layout() == w_t.layout, "loss_fedprox: parameter layout differs from the anchor");
    Tensor prox;
    for (const auto& entry : w_t.layout) {
        const auto n = numel(entry.shape);
        const Tensor anchor = Tensor::constant(
            entry.shape, std::vector<double>(w_t.data.begin() + static_cast<std::ptrdiff_t>(entry.offset),
                                             w_t.data.begin() + static_cast<std::ptrdiff_t>(entry.offset + n)));
        const Tensor term = sum(square(sub(theta.at(entry.name), anchor)));
        prox = prox.defined() ? add(prox, term) : term;
    }
    if (!prox.defined()) {
        return base_loss;
    }
    return add(base_loss, scale(prox, 0.5 * mu));
}

/// Model-contrastive term: -log( e^{cos(z,zg)/tau} / (e^{cos(z,zg)/tau} + e^{cos(z,zp)/tau}) ),
/// batch-averaged. Global and previous representations are fixed.
inline Tensor moon_contrastive(const Tensor& z_local, std::span<const double> z_global, std::span<const double> z_prev,
                               double tau) {
    require(tau > 0.0, "moon: tau must be positive");
    const Tensor pos = row_cosine(z_local, z_global);
    const Tensor neg = row_cosine(z_local, z_prev);
    const Tensor logits = scale(concat_cols(pos, neg), 1.0 / tau);
    const std::vector<int> target(z_local.dim(0), 0);
    return cross_entropy(logits, target);
}

inline Tensor loss_moon(const Tensor& z_local, std::span<const double> z_global, std::span<const double> z_prev,
                        double tau, double mu, const Tensor& base_loss) {
    return add(base_loss, scale(moon_contrastive(z_local, z_global, z_prev, tau), mu));
}

/// Sub-network widths and input scales for one GradAug step.
struct GradAugDraw {
    std::vector<double> widths;
    std::vector<double> scales;
};

inline GradAugDraw draw_gradaug(const MethodConfig& config, Rng& rng) {
    GradAugDraw d;
    for (int i = 0; i < config.n_subnets; ++i) {
        d.widths.push_back(uniform(rng, config.omega_b, 1.0));
        d.scales.push_back(kResolutionScales[static_cast<std::size_t>(rng() % kResolutionScales.size())]);
    }
    return d;
}

/// CE of the full network plus mu * sum of KL distillation losses from the
/// detached full-network softmax into each transformed, slimmed sub-network.
inline Tensor loss_gradaug(const BlockNet& net, const Tensor& x, std::span<const int> y, const MethodConfig& config,
                           const GradAugDraw& draw, Rng& rng, Tensor* full_logits = nullptr) {
    require(draw.widths.size() == draw.scales.size(), "loss_gradaug: one scale per sub-network");
    const Tensor logits = net.forward(x);
    if (full_logits) *full_logits = logits;
    Tensor total = loss_ce(logits, y);
    const auto teacher = softmax_rows(logits.values(), logits.dim(0), logits.dim(1));
    for (std::size_t i = 0; i < draw.widths.size(); ++i) {
        const Tensor xi = downsample_transform(x, draw.scales[i], rng);
        const Tensor sub_logits = net.forward_subnetwork(xi, draw.widths[i]);
        total = add(total, scale(kl_divergence(sub_logits, teacher), config.mu));
    }
    return total;
}

inline Tensor loss_gradaug(const BlockNet& net, const Tensor& x, std::span<const int> y, const MethodConfig& config,
                           Rng& rng, Tensor* full_logits = nullptr) {
    const auto draw = draw_gradaug(config, rng);
    return loss_gradaug(net, x, y, config, draw, rng, full_logits);
}

// ---------------------------------------------------------------- transmitting matrices

struct TransmittingMatrices {
    Tensor full;  // (c_{L-1}, c_L)
    Tensor sub;   // (c_{L-1}, c_L^{omega_S})
};

/// X_F = f_{L-1}^T f_L and X_S = f_{L-1}^T f_L^{sub}, with batch and spatial
/// positions as rows and channels as columns. The larger spatial map is
/// adaptively average-pooled to the smaller one first.
inline TransmittingMatrices transmitting_matrices(const Tensor& f_prev, const Tensor& f_last, const Tensor& f_sub) {
    require(f_prev.rank() == 4 && f_last.rank() == 4 && f_sub.rank() == 4,
            "transmitting_matrices: features must be (B, C, H, W)");
    require(f_prev.dim(0) == f_last.dim(0) && f_prev.dim(0) == f_sub.dim(0),
            "transmitting_matrices: batch sizes differ");
    require(f_last.dim(2) == f_sub.dim(2) && f_last.dim(3) == f_sub.dim(3),
            "transmitting_matrices: full and sub-block outputs differ spatially");
    const std::size_t h = std::min(f_prev.dim(2), f_last.dim(2));
    const std::size_t w = std::min(f_prev.dim(3), f_last.dim(3));
    const Tensor prev_rows_t = transpose(to_rows(adaptive_avg_pool2d(f_prev, h, w)));
    return {matmul(prev_rows_t, to_rows(adaptive_avg_pool2d(f_last, h, w))),
            matmul(prev_rows_t, to_rows(adaptive_avg_pool2d(f_sub, h, w)))};
}

// ---------------------------------------------------------------- spectral norm

/// sigma_max(X) by power iteration from the starting right vector v0
/// (v0 is truncated to the column count). Each iteration updates
/// u <- Xv/|Xv| then v <- X^T u/|X^T u|; the estimate is K = u^T X v.
/// u and v carry no gradient, so dK/dX = u v^T. A zero matrix yields 0.
inline Tensor spectral_norm(const Tensor& X, int power_iters, std::span<const double> v0) {
    require(X.rank() == 2, "spectral_norm: expected a matrix");
    require(power_iters >= 1, "spectral_norm: power_iters must be at least 1");
    const std::size_t m = X.dim(0), n = X.dim(1);
    require(v0.size() >= n, "spectral_norm: starting vector too short");
    const auto xv = X.values();

    std::vector<double> v(v0.begin(), v0.begin() + static_cast<std::ptrdiff_t>(n));
    std::vector<double> u(m, 0.0);
    auto normalize = [](std::vector<double>& a) {
        double s = 0.0;
        for (double x : a) s += x * x;
        s = std::sqrt(s);
        if (s == 0.0) return false;
        for (double& x : a) x /= s;
        return true;
    };
    bool ok = normalize(v);
    for (int it = 0; ok && it < power_iters; ++it) {
        for (std::size_t i = 0; i < m; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += xv[i * n + j] * v[j];
            u[i] = acc;
        }
        ok = normalize(u);
        if (!ok) break;
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < m; ++i) acc += xv[i * n + j] * u[i];
            v[j] = acc;
        }
        ok = normalize(v);
    }
    if (!ok) {
        return make_op({1}, {0.0}, {X}, [](detail::Node& self) { detail::grad_of(self, 0); });
    }
    double k = 0.0;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) k += u[i] * xv[i * n + j] * v[j];
    return make_op({1}, {k}, {X}, [m, n, u = std::move(u), v = std::move(v)](detail::Node& self) {
        if (auto* g = detail::grad_of(self, 0)) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += self.grad[0] * u[i] * v[j];
        }
    });
}

inline Tensor spectral_norm(const Tensor& X, int power_iters, Rng& rng) {
    require(X.rank() == 2, "spectral_norm: expected a matrix");
    const auto v0 = normal_vector(rng, X.dim(1));
    return spectral_norm(X, power_iters, v0);
}

// ---------------------------------------------------------------- FedAlign

struct FedAlignTerms {
    Tensor total;
    Tensor ce;
    Tensor logits;
    double k_full = 0.0;
    double k_sub = 0.0;
    double lip = 0.0;         // (K_S - K_F)^2 before scaling
    double lip_scaled = 0.0;  // 0 when the guard skipped the term
    bool guard_taken = false;
};

/// L_CE + mu * (value(L_CE) / value(L_Lip)) * L_Lip with L_Lip = (K_S - K_F)^2.
/// The Lipschitz term is dropped when value(L_Lip) < lip_epsilon.
inline FedAlignTerms loss_fedalign(const BlockNet& net, const Tensor& x, std::span<const int> y,
                                  const MethodConfig& config, Rng& rng) {
    const auto out = net.forward_with_features(x);
    const Tensor f_sub = net.forward_final_subblock(out.f_prev, config.omega_S);
    const auto tm = transmitting_matrices(out.f_prev, out.f_last, f_sub);
    // Shared starting vector so identical matrices give identical estimates.
    const auto v0 = normal_vector(rng, tm.full.dim(1));
    const Tensor k_full = spectral_norm(tm.full, config.power_iters, v0);
    const Tensor k_sub = spectral_norm(tm.sub, config.power_iters, v0);
    const Tensor lip = square(sub(k_sub, k_full));

    FedAlignTerms t;
    t.logits = out.logits;
    t.ce = loss_ce(out.logits, y);
    t.k_full = k_full.item();
    t.k_sub = k_sub.item();
    t.lip = lip.item();
    if (!(t.lip >= config.lip_epsilon) || t.lip == 0.0) {
        t.guard_taken = true;
        t.total = t.ce;
        return t;
    }
    const Tensor scaled = scale(lip, config.mu * t.ce.item() / t.lip);
    t.lip_scaled = scaled.item();
    t.total = add(t.ce, scaled);
    return t;
}

} // namespace fedalign

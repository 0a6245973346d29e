#pragma once

// Curvature diagnostics built on finite-difference Hessian-vector products:
// top eigenvalues (power iteration with deflation), Hutchinson trace and
// diagonal, cross-client Hessian matching, and loss-landscape slices.
//
// A loss function here is any callable returning a scalar Tensor computed
// from the current values of the ParamSet it closes over.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedalign/params.hpp"
#include "fedalign/rng.hpp"

namespace fedalign {

template <class F>
concept LossFunction = requires(F f) {
    { f() } -> std::convertible_to<Tensor>;
};

class NumericalError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// Restores the parameter values on scope exit, including on exceptions.
class ParamRestore {
  public:
    explicit ParamRestore(ParamSet& params) : params_(params), saved_(params.to_vector().data) {}
    ~ParamRestore() { params_.load_values(saved_); }
    ParamRestore(const ParamRestore&) = delete;
    ParamRestore& operator=(const ParamRestore&) = delete;
    const std::vector<double>& saved() const { return saved_; }

  private:
    ParamSet& params_;
    std::vector<double> saved_;
};

} // namespace detail

/// Gradient of the loss at the current parameter values, flattened.
template <LossFunction F>
std::vector<double> loss_gradient(ParamSet& params, F& loss_fn) {
    params.zero_grad();
    const Tensor loss = loss_fn();
    backward(loss);
    auto g = params.grad_vector();
    params.zero_grad();
    return g;
}

// 1e-4 kept flipping ReLU gates on trained nets and power iteration wandered;
// 1e-5 and 1e-6 agree to all printed digits there and on smooth tests.
inline constexpr double kDefaultHvpStep = 1e-5;

/// Hv ~= [grad L(theta + h v^) - grad L(theta - h v^)] / (2h) * |v|, v^ = v/|v|.
template <LossFunction F>
std::vector<double> hvp(ParamSet& params, F& loss_fn, std::span<const double> v, double h = kDefaultHvpStep) {
    require(v.size() == params.total_size(), "hvp: direction length does not match the parameter count");
    require(h > 0.0, "hvp: step must be positive");
    const double vn = detail::norm2(v);
    require(vn >= 1e-12, "hvp: direction norm is below 1e-12");

    detail::ParamRestore restore(params);
    const auto& theta = restore.saved();
    std::vector<double> probe(theta.size());
    for (std::size_t i = 0; i < probe.size(); ++i) probe[i] = theta[i] + h * v[i] / vn;
    params.load_values(probe);
    const auto g_plus = loss_gradient(params, loss_fn);
    for (std::size_t i = 0; i < probe.size(); ++i) probe[i] = theta[i] - h * v[i] / vn;
    params.load_values(probe);
    const auto g_minus = loss_gradient(params, loss_fn);

    std::vector<double> hv(theta.size());
    for (std::size_t i = 0; i < hv.size(); ++i) {
        hv[i] = (g_plus[i] - g_minus[i]) / (2.0 * h) * vn;
        if (!std::isfinite(hv[i])) {
            throw NumericalError("hvp: non-finite Hessian-vector product");
        }
    }
    return hv;
}

struct EigenResult {
    std::vector<double> eigenvalues;                // signed, ordered by descending magnitude
    std::vector<std::vector<double>> eigenvectors;  // unit vectors, same order
    std::vector<bool> converged;
    std::vector<int> iterations;
};

struct PowerIterationOptions {
    int max_iters = 100;
    double tol = 1e-4;
    std::uint64_t seed = 0;
    double fd_step = kDefaultHvpStep;
};

/// Top-k Hessian eigenpairs by power iteration, deflating found pairs.
template <LossFunction F>
EigenResult top_eigenvalues(ParamSet& params, F& loss_fn, std::size_t k, const PowerIterationOptions& opt = {}) {
    require(k >= 1, "top_eigenvalues: k must be at least 1");
    require(opt.max_iters >= 1, "top_eigenvalues: max_iters must be at least 1");
    const std::size_t n = params.total_size();
    require(k <= n, "top_eigenvalues: k exceeds the parameter count");
    EigenResult r;
    for (std::size_t e = 0; e < k; ++e) {
        Rng rng = make_rng(opt.seed, {0x656967, e});
        auto v = normal_vector(rng, n);
        auto project_out = [&](std::vector<double>& x) {
            for (const auto& q : r.eigenvectors) {
                const double c = detail::dot(x, q);
                for (std::size_t i = 0; i < n; ++i) x[i] -= c * q[i];
            }
        };
        project_out(v);
        double vn = detail::norm2(v);
        for (auto& x : v) x /= vn;

        double lambda = 0.0;
        bool converged = false;
        int it = 0;
        for (; it < opt.max_iters; ++it) {
            auto w = hvp(params, loss_fn, v, opt.fd_step);
            for (std::size_t j = 0; j < r.eigenvectors.size(); ++j) {
                const double c = r.eigenvalues[j] * detail::dot(r.eigenvectors[j], v);
                for (std::size_t i = 0; i < n; ++i) w[i] -= c * r.eigenvectors[j][i];
            }
            const double next = detail::dot(v, w);
            const double wn = detail::norm2(w);
            if (wn == 0.0) {
                lambda = 0.0;
                converged = true;
                ++it;
                break;
            }
            for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / wn;
            const bool done = it > 0 && std::abs(next - lambda) <= opt.tol * std::abs(next);
            lambda = next;
            if (done) {
                converged = true;
                ++it;
                break;
            }
        }
        r.eigenvalues.push_back(lambda);
        r.eigenvectors.push_back(v);
        r.converged.push_back(converged);
        r.iterations.push_back(it);
    }

    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](auto a, auto b) { return std::abs(r.eigenvalues[a]) > std::abs(r.eigenvalues[b]); });
    EigenResult sorted;
    for (auto i : order) {
        sorted.eigenvalues.push_back(r.eigenvalues[i]);
        sorted.eigenvectors.push_back(std::move(r.eigenvectors[i]));
        sorted.converged.push_back(r.converged[i]);
        sorted.iterations.push_back(r.iterations[i]);
    }
    return sorted;
}

struct TraceEstimate {
    double estimate = 0.0;
    double stderr_ = 0.0;
    int num_probes = 0;
};

/// Hutchinson trace: mean of v^T H v over Rademacher probes.
template <LossFunction F>
TraceEstimate hutchinson_trace(ParamSet& params, F& loss_fn, int num_probes, std::uint64_t seed,
                               double fd_step = kDefaultHvpStep) {
    require(num_probes >= 1, "hutchinson_trace: num_probes must be at least 1");
    Rng rng = make_rng(seed, {0x747263});
    double sum = 0.0, sum_sq = 0.0;
    for (int p = 0; p < num_probes; ++p) {
        const auto v = rademacher_vector(rng, params.total_size());
        const double s = detail::dot(v, hvp(params, loss_fn, v, fd_step));
        sum += s;
        sum_sq += s * s;
    }
    TraceEstimate t;
    t.num_probes = num_probes;
    t.estimate = sum / num_probes;
    if (num_probes > 1) {
        const double var = std::max(0.0, (sum_sq - num_probes * t.estimate * t.estimate) / (num_probes - 1));
        t.stderr_ = std::sqrt(var / num_probes);
    }
    return t;
}

struct DiagonalEstimate {
    ParamVector diag;             // layout of the parameter set
    std::vector<double> stderr_;  // per element
    int num_probes = 0;
};

/// Hutchinson-style diagonal: elementwise mean of v * Hv over Rademacher probes.
template <LossFunction F>
DiagonalEstimate hessian_diagonal(ParamSet& params, F& loss_fn, int num_probes, std::uint64_t seed,
                                  double fd_step = kDefaultHvpStep) {
    require(num_probes >= 1, "hessian_diagonal: num_probes must be at least 1");
    const std::size_t n = params.total_size();
    Rng rng = make_rng(seed, {0x646961});
    std::vector<double> sum(n, 0.0), sum_sq(n, 0.0);
    for (int p = 0; p < num_probes; ++p) {
        const auto v = rademacher_vector(rng, n);
        const auto hv = hvp(params, loss_fn, v, fd_step);
        for (std::size_t i = 0; i < n; ++i) {
            const double s = v[i] * hv[i];
            sum[i] += s;
            sum_sq[i] += s * s;
        }
    }
    DiagonalEstimate d;
    d.num_probes = num_probes;
    d.diag.layout = params.layout();
    d.diag.data.resize(n);
    d.stderr_.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double m = sum[i] / num_probes;
        d.diag.data[i] = m;
        if (num_probes > 1) {
            const double var = std::max(0.0, (sum_sq[i] - num_probes * m * m) / (num_probes - 1));
            d.stderr_[i] = std::sqrt(var / num_probes);
        }
    }
    return d;
}

struct HessianReport {
    std::vector<double> top_eigenvalues;
    std::vector<bool> converged;
    double trace_estimate = 0.0;
    double trace_stderr = 0.0;
    ParamVector diag_estimate;
    int num_probes = 0;
    std::uint64_t probe_seed = 0;
    double fd_step = kDefaultHvpStep;
    std::vector<std::vector<double>> eigenvectors;
};

struct HessianOptions {
    std::size_t top_k = 2;
    PowerIterationOptions power{};
    int num_probes = 100;
    std::uint64_t probe_seed = 0;
    bool with_diagonal = true;
};

template <LossFunction F>
HessianReport hessian_report(ParamSet& params, F& loss_fn, const HessianOptions& opt) {
    HessianReport r;
    auto eig = top_eigenvalues(params, loss_fn, opt.top_k, opt.power);
    r.top_eigenvalues = eig.eigenvalues;
    r.converged = eig.converged;
    r.eigenvectors = std::move(eig.eigenvectors);
    const auto tr = hutchinson_trace(params, loss_fn, opt.num_probes, opt.probe_seed, opt.power.fd_step);
    r.trace_estimate = tr.estimate;
    r.trace_stderr = tr.stderr_;
    if (opt.with_diagonal) {
        r.diag_estimate = hessian_diagonal(params, loss_fn, opt.num_probes, opt.probe_seed, opt.power.fd_step).diag;
    }
    r.num_probes = opt.num_probes;
    r.probe_seed = opt.probe_seed;
    r.fd_step = opt.power.fd_step;
    return r;
}

// ---------------------------------------------------------------- cross-client matching

struct PairMetrics {
    std::size_t k = 0, j = 0;
    double h_n = 0.0;         // (|d_k|^2 - |d_j|^2)^2
    double h_d = 0.0;         // (d_k . d_j) / (|d_k|^2 |d_j|^2)
    double h_d_cosine = 0.0;  // (d_k . d_j) / (|d_k| |d_j|)
};

struct CrossClientReport {
    double h_n = 0.0;
    double h_d = 0.0;
    double h_d_cosine = 0.0;
    std::vector<PairMetrics> pairs;
};

/// Norm-difference and direction-similarity of Hessian diagonals, averaged
/// over all unordered client pairs.
inline CrossClientReport cross_client_metrics(const std::vector<std::vector<double>>& diagonals) {
    require(diagonals.size() >= 2, "cross_client_metrics: need at least two clients");
    const std::size_t n = diagonals.front().size();
    std::vector<double> sq(diagonals.size());
    for (std::size_t c = 0; c < diagonals.size(); ++c) {
        require(diagonals[c].size() == n, "cross_client_metrics: diagonal lengths differ");
        sq[c] = detail::dot(diagonals[c], diagonals[c]);
        if (sq[c] == 0.0) {
            throw NumericalError("cross_client_metrics: client " + std::to_string(c) + " has a zero Hessian diagonal");
        }
    }
    CrossClientReport r;
    for (std::size_t k = 0; k < diagonals.size(); ++k)
        for (std::size_t j = k + 1; j < diagonals.size(); ++j) {
            const double d = detail::dot(diagonals[k], diagonals[j]);
            PairMetrics p;
            p.k = k;
            p.j = j;
            p.h_n = (sq[k] - sq[j]) * (sq[k] - sq[j]);
            p.h_d = d / (sq[k] * sq[j]);
            p.h_d_cosine = d / (std::sqrt(sq[k]) * std::sqrt(sq[j]));
            r.h_n += p.h_n;
            r.h_d += p.h_d;
            r.h_d_cosine += p.h_d_cosine;
            r.pairs.push_back(p);
        }
    const auto pairs = static_cast<double>(r.pairs.size());
    r.h_n /= pairs;
    r.h_d /= pairs;
    r.h_d_cosine /= pairs;
    return r;
}

// ---------------------------------------------------------------- landscape

struct LandscapeGrid {
    std::vector<double> coords;               // shared axis values in [-radius, radius]
    std::vector<std::vector<double>> loss;    // loss[i][j] at (coords[i], coords[j])
    std::vector<double> dir1, dir2;           // orthonormalized directions
};

/// Loss on theta + a*dir1 + b*dir2 over a grid x grid lattice.
template <LossFunction F>
LandscapeGrid landscape_slice(ParamSet& params, F& loss_fn, std::vector<double> dir1, std::vector<double> dir2,
                              std::size_t grid, double radius) {
    require(grid >= 2, "landscape_slice: grid must be at least 2");
    require(radius > 0.0, "landscape_slice: radius must be positive");
    const std::size_t n = params.total_size();
    require(dir1.size() == n && dir2.size() == n, "landscape_slice: direction length mismatch");
    const double n1 = detail::norm2(dir1);
    require(n1 > 0.0, "landscape_slice: first direction is zero");
    for (auto& x : dir1) x /= n1;
    const double c = detail::dot(dir1, dir2);
    for (std::size_t i = 0; i < n; ++i) dir2[i] -= c * dir1[i];
    const double n2 = detail::norm2(dir2);
    require(n2 > 1e-12, "landscape_slice: directions are parallel");
    for (auto& x : dir2) x /= n2;

    LandscapeGrid g;
    const double span = static_cast<double>(grid - 1);
    for (std::size_t i = 0; i < grid; ++i) {
        g.coords.push_back(radius * (2.0 * static_cast<double>(i) - span) / span);
    }
    detail::ParamRestore restore(params);
    const auto& theta = restore.saved();
    std::vector<double> probe(n);
    g.loss.assign(grid, std::vector<double>(grid));
    for (std::size_t i = 0; i < grid; ++i)
        for (std::size_t j = 0; j < grid; ++j) {
            const double a = g.coords[i], b = g.coords[j];
            for (std::size_t p = 0; p < n; ++p) probe[p] = theta[p] + a * dir1[p] + b * dir2[p];
            params.load_values(probe);
            g.loss[i][j] = loss_fn().item();
        }
    g.dir1 = std::move(dir1);
    g.dir2 = std::move(dir2);
    return g;
}

} // namespace fedalign

#pragma once

// Curvature diagnostics of trained models on fixed probe batches.

#include <algorithm>
#include <fstream>
#include <string>
#include <vector>

#include "fedalign/blocknet.hpp"
#include "fedalign/config.hpp"
#include "fedalign/data.hpp"
#include "fedalign/losses.hpp"
#include "fedalign/metrics.hpp"
#include "fedalign/second_order.hpp"

namespace fedalign {

struct DiagnoseOptions {
    std::size_t top_k = 2;
    int power_iters = 100;
    double power_tol = 1e-4;
    int num_probes = 1000;
    std::uint64_t seed = 0;
    std::size_t probe_batch = 256;
    std::size_t grid = 21;
    double radius = 1.0;
    double fd_step = kDefaultHvpStep;
};

/// Cross-entropy of a model on a fixed batch, bound to the model's parameters.
class BatchLoss {
  public:
    BatchLoss(BlockNet net, const LabeledDataset& data, std::span<const std::size_t> idx)
        : net_(std::move(net)), x_(data.batch(idx)), y_(data.batch_labels(idx)) {}

    Tensor operator()() const { return loss_ce(net_.forward(x_), y_); }
    ParamSet& params() { return net_.params(); }

  private:
    BlockNet net_;
    Tensor x_;
    std::vector<int> y_;
};

inline std::vector<std::size_t> probe_indices(std::span<const std::size_t> pool, std::size_t max_size) {
    return {pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(std::min(max_size, pool.size()))};
}

inline HessianOptions hessian_options(const DiagnoseOptions& o, std::uint64_t stream) {
    HessianOptions h;
    h.top_k = o.top_k;
    h.power.max_iters = o.power_iters;
    h.power.tol = o.power_tol;
    h.power.seed = derive_seed(o.seed, {stream});
    h.power.fd_step = o.fd_step;
    h.num_probes = o.num_probes;
    h.probe_seed = derive_seed(o.seed, {stream, 1});
    return h;
}

inline constexpr std::uint64_t kGlobalStream = 0x676c6f62;

/// Hessian report of the global model on the first probe_batch test samples.
inline HessianReport global_hessian(const BlockNet& net, const LabeledDataset& test, const DiagnoseOptions& o,
                                    bool with_diagonal = false) {
    const auto idx = probe_indices(test.all_indices(), o.probe_batch);
    BatchLoss loss(net, test, idx);
    auto h = hessian_options(o, kGlobalStream);
    h.with_diagonal = with_diagonal;
    return hessian_report(loss.params(), loss, h);
}

/// Hessian diagonal of the global model on one client's shard.
inline DiagonalEstimate client_hessian_diagonal(const BlockNet& net, const LabeledDataset& train,
                                                std::span<const std::size_t> shard, std::size_t client_id,
                                                const DiagnoseOptions& o) {
    const auto idx = probe_indices(shard, o.probe_batch);
    BatchLoss loss(net, train, idx);
    return hessian_diagonal(loss.params(), loss, o.num_probes, derive_seed(o.seed, {0x636c69, client_id}), o.fd_step);
}

inline json hessian_report_to_json(const HessianReport& r) {
    return {{"top_eigenvalues", r.top_eigenvalues},
            {"lambda_max", r.top_eigenvalues.empty() ? 0.0 : r.top_eigenvalues.front()},
            {"converged", r.converged},
            {"trace_estimate", r.trace_estimate},
            {"trace_stderr", r.trace_stderr},
            {"num_probes", r.num_probes},
            {"probe_seed", r.probe_seed},
            {"fd_step", r.fd_step},
            {"diag_estimate", r.diag_estimate.data}};
}

inline json cross_client_to_json(const CrossClientReport& r, const std::vector<std::size_t>& client_ids) {
    json pairs = json::array();
    for (const auto& p : r.pairs) {
        pairs.push_back({{"k", client_ids[p.k]},
                         {"j", client_ids[p.j]},
                         {"h_n", p.h_n},
                         {"h_d", p.h_d},
                         {"h_d_cosine", p.h_d_cosine}});
    }
    return {{"clients", client_ids}, {"h_n", r.h_n}, {"h_d", r.h_d}, {"h_d_cosine", r.h_d_cosine}, {"pairs", pairs}};
}

inline void write_landscape_csv(const LandscapeGrid& g, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << "a,b,loss\n";
    for (std::size_t i = 0; i < g.coords.size(); ++i)
        for (std::size_t j = 0; j < g.coords.size(); ++j) {
            out << detail::fmt_double(g.coords[i]) << "," << detail::fmt_double(g.coords[j]) << ","
                << detail::fmt_double(g.loss[i][j]) << "\n";
        }
    if (!out) throw IoError("write failed for " + path);
}

} // namespace fedalign

#pragma once

// Server side of the protocol: client sampling, weighted aggregation, the
// round loop and whole experiments with checkpoint/resume.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <thread>
#include <vector>

#include "fedalign/checkpoint.hpp"
#include "fedalign/client.hpp"
#include "fedalign/config.hpp"
#include "fedalign/cost.hpp"
#include "fedalign/metrics.hpp"

namespace fedalign {

class RoundError : public std::runtime_error {
  public:
    RoundError(int round, std::size_t client, const std::string& what)
        : std::runtime_error("round " + std::to_string(round) + ", client " + std::to_string(client) + ": " + what),
          round_(round), client_(client) {}
    int round() const { return round_; }
    std::size_t client() const { return client_; }

  private:
    int round_;
    std::size_t client_;
};

/// sum_c (n_c / n) theta_c, accumulated in list order as theta_0 + sum_c (n_c / n)(theta_c - theta_0),
/// which is exact when every client returns the same vector.
inline ParamVector aggregate(const std::vector<ParamVector>& client_params, const std::vector<std::size_t>& counts) {
    require(!client_params.empty(), "aggregate: no client parameters");
    require(client_params.size() == counts.size(), "aggregate: one count per client");
    const auto& ref = client_params.front();
    double n = 0.0;
    for (std::size_t c = 0; c < counts.size(); ++c) {
        require(counts[c] > 0, "aggregate: client counts must be positive");
        require(client_params[c].layout == ref.layout, "aggregate: client " + std::to_string(c) + " layout mismatch");
        require(client_params[c].data.size() == ref.data.size(), "aggregate: parameter length mismatch");
        n += static_cast<double>(counts[c]);
    }
    ParamVector out = ref;
    for (std::size_t c = 1; c < client_params.size(); ++c) {
        const double w = static_cast<double>(counts[c]) / n;
        const auto& theta = client_params[c].data;
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += w * (theta[i] - ref.data[i]);
    }
    return out;
}

struct ClientUpdate {
    std::size_t client_id = 0;
    ParamVector params;
    std::size_t count = 0;
};

/// Aggregation in ascending client-id order regardless of input order.
inline ParamVector aggregate(std::vector<ClientUpdate> updates) {
    std::sort(updates.begin(), updates.end(), [](const auto& a, const auto& b) { return a.client_id < b.client_id; });
    std::vector<ParamVector> params;
    std::vector<std::size_t> counts;
    for (auto& u : updates) {
        params.push_back(std::move(u.params));
        counts.push_back(u.count);
    }
    return aggregate(params, counts);
}

/// ceil(fraction * C) distinct ids, uniform without replacement, sorted.
inline std::vector<std::size_t> sample_clients(std::size_t num_clients, double fraction, int round, std::uint64_t seed) {
    require(num_clients >= 1, "sample_clients: need at least one client");
    require(fraction > 0.0 && fraction <= 1.0, "sample_clients: fraction must lie in (0, 1]");
    const auto k = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(num_clients) - 1e-12));
    std::vector<std::size_t> ids(num_clients);
    std::iota(ids.begin(), ids.end(), 0);
    if (k >= num_clients) return ids;
    Rng rng = make_rng(seed, {0x73616d70, static_cast<std::uint64_t>(round)});
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(k);
    std::sort(ids.begin(), ids.end());
    return ids;
}

enum class CommBilling { one_transfer, upload_and_download };

/// Bits moved as 32-bit weights per sampled client per round. The default
/// bills one model transfer per client, the convention of the reference
/// ResNet-56 cost table; upload_and_download doubles it.
inline std::uint64_t comm_cost(std::uint64_t param_count, std::uint64_t rounds_completed, std::uint64_t clients_per_round,
                               CommBilling billing = CommBilling::one_transfer) {
    const std::uint64_t transfers = billing == CommBilling::upload_and_download ? 2 : 1;
    return param_count * 32 * transfers * clients_per_round * rounds_completed;
}

/// Everything derived from the configuration before round one.
struct Experiment {
    ExperimentConfig config;
    BlockNetSpec spec;
    TrainTestSplit data;
    Partition partition;
    double forward_flops = 0.0;  // per sample and local step under the configured method

    explicit Experiment(ExperimentConfig cfg) : config(std::move(cfg)) {
        config.validate();
        spec = config.model_spec();
        const std::uint64_t data_seed = config.dataset.seed.value_or(config.seed);
        const auto full = make_synthetic_mixture(config.dataset.synthetic, data_seed);
        data = split_train_test(full, config.dataset.test_fraction, data_seed);
        partition = config.alpha > 0.0
                        ? dirichlet_partition(data.train.labels, config.num_clients, config.alpha, config.seed)
                        : iid_partition(data.train.size(), config.num_clients, config.seed);
        forward_flops = method_forward_flops(spec, config.method);
    }

    BlockNet initial_model() const { return BlockNet(spec, derive_seed(config.seed, {0x696e6974})); }
};

struct ServerState {
    BlockNet global;
    std::map<std::size_t, ParamVector> previous_local;
    int round = 0;  // rounds completed
    std::uint64_t comm_bits_cum = 0;
    double flops_cum = 0.0;
};

inline ServerState initial_state(const Experiment& exp) {
    ServerState s;
    s.global = exp.initial_model();
    return s;
}

inline Checkpoint to_checkpoint(const ServerState& s, const ExperimentConfig& cfg) {
    Checkpoint ck;
    ck.round = s.round;
    ck.global = s.global.params().to_vector();
    ck.previous_local = s.previous_local;
    ck.config_hash = config_hash(cfg);
    ck.comm_bits_cum = s.comm_bits_cum;
    ck.flops_cum = s.flops_cum;
    return ck;
}

inline ServerState state_from_checkpoint(const Experiment& exp, const Checkpoint& ck) {
    if (ck.config_hash != config_hash(exp.config)) {
        throw CheckpointError("checkpoint: written by a different configuration");
    }
    ServerState s = initial_state(exp);
    if (!(ck.global.layout == s.global.params().layout())) {
        throw CheckpointError("checkpoint: parameter layout does not match the model");
    }
    s.global.params().load(ck.global);
    s.previous_local = ck.previous_local;
    s.round = ck.round;
    s.comm_bits_cum = ck.comm_bits_cum;
    s.flops_cum = ck.flops_cum;
    return s;
}

/// Runs fn(0..n-1) on up to `threads` workers. Exceptions are captured per
/// task; the lowest failing index is rethrown after all workers finish.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
    std::vector<std::exception_ptr> errors(n);
    auto guarded = [&](std::size_t i) {
        try {
            fn(i);
        } catch (...) {
            errors[i] = std::current_exception();
        }
    };
    const auto workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) guarded(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < n; i = next++) guarded(i);
            });
        }
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

/// One round: sample, broadcast, local updates, aggregate, evaluate if scheduled.
inline RoundMetrics run_round(ServerState& state, const Experiment& exp) {
    const auto& cfg = exp.config;
    const int r = state.round;
    const auto sampled = sample_clients(cfg.num_clients, cfg.sample_fraction, r, cfg.seed);
    const ParamVector snapshot = state.global.params().to_vector();
    const bool moon = cfg.method.method == Method::moon;

    std::vector<LocalResult> results(sampled.size());
    parallel_for(sampled.size(), cfg.threads, [&](std::size_t i) {
        const std::size_t c = sampled[i];
        try {
            ClientContext ctx{state.global, snapshot, std::nullopt, &exp.data.train, exp.partition.assignments[c],
                              derive_seed(cfg.seed, {0x636c69, static_cast<std::uint64_t>(r), c})};
            if (moon) {
                const auto it = state.previous_local.find(c);
                if (it != state.previous_local.end()) ctx.previous_local = it->second;
            }
            OptimizerState opt;
            opt.learning_rate = cfg.learning_rate;
            opt.momentum = cfg.momentum;
            opt.clip_norm = cfg.clip_norm;
            results[i] = client_update(ctx, cfg.method, cfg.local_epochs, cfg.batch_size, opt);
        } catch (const std::exception& e) {
            throw RoundError(r + 1, c, e.what());
        }
    });

    std::vector<ParamVector> params;
    std::vector<std::size_t> counts;
    RoundMetrics m;
    m.round = r + 1;
    m.sampled_ids = sampled;
    std::size_t samples = 0;
    for (std::size_t i = 0; i < sampled.size(); ++i) {
        params.push_back(results[i].params);
        counts.push_back(exp.partition.assignments[sampled[i]].size());
        const auto& losses = results[i].metrics.epoch_loss;
        m.client_train_loss.push_back(losses.empty() ? std::nan("") : losses.back());
        samples += results[i].metrics.samples;
    }
    state.global.params().load(aggregate(params, counts));
    if (moon) {
        for (std::size_t i = 0; i < sampled.size(); ++i) state.previous_local[sampled[i]] = std::move(params[i]);
    }

    state.round = r + 1;
    state.comm_bits_cum += comm_cost(state.global.params().total_size(), 1, sampled.size());
    state.flops_cum += exp.forward_flops * static_cast<double>(samples);
    m.comm_bits_cum = state.comm_bits_cum;
    m.flops_cum = state.flops_cum;
    if (state.round % cfg.eval_every == 0 || state.round == cfg.rounds) {
        const auto ev = evaluate(state.global, exp.data.test, cfg.method);
        m.test_acc = ev.accuracy;
        m.test_loss = ev.loss;
    }
    return m;
}

struct ExperimentResult {
    ServerState state;
    std::vector<RoundMetrics> metrics;  // rounds run by this call
};

struct RunOptions {
    bool write_files = true;
    std::optional<std::string> resume_from;  // checkpoint path
    std::function<void(const RoundMetrics&)> on_round;
};

inline std::string checkpoint_path(const std::string& output_dir, int round) {
    return output_dir + "/checkpoints/round_" + std::to_string(round) + ".ckpt";
}

/// Runs rounds until config.rounds are complete, optionally continuing from a
/// checkpoint. With write_files, checkpoints go out every eval_every rounds
/// and at the end, along with metrics.csv, metrics.json and config_echo.json.
inline ExperimentResult run_experiment(const ExperimentConfig& config, const RunOptions& opt = {}) {
    const Experiment exp(config);
    ExperimentResult res;
    res.state = opt.resume_from ? state_from_checkpoint(exp, load_checkpoint(*opt.resume_from)) : initial_state(exp);

    const auto& dir = config.output_dir;
    if (opt.write_files) {
        std::error_code ec;
        std::filesystem::create_directories(dir + "/checkpoints", ec);
        if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
        std::ofstream echo(dir + "/config_echo.json", std::ios::trunc);
        if (!echo) throw IoError("cannot write " + dir + "/config_echo.json");
        echo << config_to_json(config).dump(2) << "\n";
    }
    while (res.state.round < config.rounds) {
        auto m = run_round(res.state, exp);
        if (opt.on_round) opt.on_round(m);
        res.metrics.push_back(std::move(m));
        const int r = res.state.round;
        if (opt.write_files && (r % config.eval_every == 0 || r == config.rounds)) {
            try {
                save_checkpoint(checkpoint_path(dir, r), to_checkpoint(res.state, config));
                emit_metrics(res.metrics, dir);
            } catch (const IoError& e) {
                throw IoError(std::string(e.what()) + " (after round " + std::to_string(r) + ")");
            }
        }
    }
    return res;
}

} // namespace fedalign

#pragma once

// Client-side local training loop.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <vector>

#include "fedalign/blocknet.hpp"
#include "fedalign/cost.hpp"
#include "fedalign/data.hpp"
#include "fedalign/losses.hpp"
#include "fedalign/method.hpp"
#include "fedalign/optim.hpp"

namespace fedalign {

struct ClientContext {
    BlockNet model;                              // holds the received global weights on entry
    ParamVector global_weights;                  // frozen round anchor w^t
    std::optional<ParamVector> previous_local;   // MOON: this client's last local model
    const LabeledDataset* dataset = nullptr;
    std::vector<std::size_t> indices;            // this client's shard
    std::uint64_t seed = 0;                      // stream key for shuffling and method noise
};

struct LocalMetrics {
    std::vector<double> epoch_loss;
    std::vector<double> epoch_accuracy;
    std::size_t steps = 0;
    std::size_t samples = 0;
};

struct LocalResult {
    ParamVector params;
    LocalMetrics metrics;
};

class EmptyShardError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
    const std::size_t B = logits.dim(0), K = logits.dim(1);
    std::size_t correct = 0;
    for (std::size_t b = 0; b < B; ++b) {
        const auto row = logits.values().subspan(b * K, K);
        const auto pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        if (pred == static_cast<std::size_t>(labels[b])) ++correct;
    }
    return correct;
}

} // namespace detail

/// Inference-mode logits of a model trained with `method`.
inline Tensor predict(const BlockNet& net, const Tensor& x, const MethodConfig& method) {
    if (method.method == Method::stochdepth) {
        return net.stochdepth_eval(x, method.gamma_L);
    }
    return net.forward(x);
}

struct EvalResult {
    double accuracy = 0.0;
    double loss = 0.0;
};

inline EvalResult evaluate(const BlockNet& net, const LabeledDataset& data, const MethodConfig& method,
                           std::size_t batch_size = 256) {
    require(data.size() > 0, "evaluate: empty dataset");
    EvalResult r;
    std::size_t correct = 0;
    double loss = 0.0;
    const auto idx = data.all_indices();
    for (std::size_t start = 0; start < idx.size(); start += batch_size) {
        const std::span<const std::size_t> chunk(idx.data() + start, std::min(batch_size, idx.size() - start));
        const auto y = data.batch_labels(chunk);
        const Tensor logits = predict(net, data.batch(chunk), method);
        correct += detail::count_correct(logits, y);
        loss += loss_ce(logits, y).item() * static_cast<double>(chunk.size());
    }
    r.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    r.loss = loss / static_cast<double>(data.size());
    return r;
}

/// Loss of one local step for the configured method; also reports the
/// correct-prediction count of the step's main forward pass.
struct StepLoss {
    Tensor loss;
    std::size_t correct = 0;
};

inline StepLoss method_step_loss(const ClientContext& ctx, const MethodConfig& config, const Tensor& x,
                                 std::span<const int> y, Rng& method_rng, const BlockNet* global_net,
                                 const BlockNet* previous_net) {
    const BlockNet& net = ctx.model;
    switch (config.method) {
    case Method::fedavg: {
        const Tensor logits = net.forward(x);
        return {loss_ce(logits, y), detail::count_correct(logits, y)};
    }
    case Method::fedprox: {
        const Tensor logits = net.forward(x);
        return {loss_fedprox(loss_ce(logits, y), net.params(), ctx.global_weights, config.mu),
                detail::count_correct(logits, y)};
    }
    case Method::moon: {
        const auto out = net.forward_with_features(x);
        const Tensor z = net.project(out.f_last);
        const Tensor zg = global_net->project(global_net->forward_with_features(x).f_last);
        const Tensor zp = previous_net->project(previous_net->forward_with_features(x).f_last);
        return {loss_moon(z, zg.values(), zp.values(), config.tau, config.mu, loss_ce(out.logits, y)),
                detail::count_correct(out.logits, y)};
    }
    case Method::mixup: {
        std::vector<std::size_t> perm(y.size());
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), method_rng);
        std::vector<double> xb(x.numel());
        std::vector<int> yb(y.size());
        const std::size_t d = x.numel() / y.size();
        for (std::size_t i = 0; i < perm.size(); ++i) {
            std::copy_n(x.values().begin() + static_cast<std::ptrdiff_t>(perm[i] * d), d,
                        xb.begin() + static_cast<std::ptrdiff_t>(i * d));
            yb[i] = y[perm[i]];
        }
        const auto mixed = mixup_batch(x, y, Tensor::constant(x.shape(), std::move(xb)), yb, config.gamma, method_rng);
        const Tensor logits = net.forward(mixed.inputs);
        const Tensor loss =
            combine(loss_ce(logits, mixed.labels_a), mixed.beta, loss_ce(logits, mixed.labels_b), 1.0 - mixed.beta);
        return {loss, detail::count_correct(logits, mixed.beta >= 0.5 ? mixed.labels_a : mixed.labels_b)};
    }
    case Method::stochdepth: {
        auto [logits, mask] = net.stochdepth_forward(x, config.gamma_L, method_rng);
        return {loss_ce(logits, y), detail::count_correct(logits, y)};
    }
    case Method::gradaug: {
        Tensor logits;
        Tensor loss = loss_gradaug(net, x, y, config, method_rng, &logits);
        return {loss, detail::count_correct(logits, y)};
    }
    case Method::fedalign: {
        auto terms = loss_fedalign(net, x, y, config, method_rng);
        return {terms.total, detail::count_correct(terms.logits, y)};
    }
    }
    throw ContractViolation("unsupported method");
}

/// E epochs of mini-batch SGD on the client's shard. The optimizer's velocity
/// persists across the epochs of this call.
inline LocalResult client_update(ClientContext& ctx, const MethodConfig& config, int epochs, std::size_t batch_size,
                                 OptimizerState& opt) {
    config.validate();
    require(epochs >= 0, "client_update: epochs must be non-negative");
    require(batch_size >= 1, "client_update: batch_size must be positive");
    require(ctx.dataset != nullptr, "client_update: no dataset attached");
    if (ctx.indices.empty()) {
        throw EmptyShardError("client_update: client shard is empty");
    }

    std::optional<BlockNet> global_net, previous_net;
    if (config.method == Method::moon) {
        global_net.emplace(ctx.model);
        global_net->params().load(ctx.global_weights);
        previous_net.emplace(ctx.model);
        previous_net->params().load(ctx.previous_local ? *ctx.previous_local : ctx.global_weights);
    }

    Rng shuffle_rng = make_rng(ctx.seed, {0x73687566});
    Rng method_rng = make_rng(ctx.seed, {0x6d657468});
    LocalResult result;
    std::vector<std::size_t> order = ctx.indices;
    for (int e = 0; e < epochs; ++e) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < order.size(); start += batch_size) {
            const std::span<const std::size_t> idx(order.data() + start, std::min(batch_size, order.size() - start));
            const Tensor x = ctx.dataset->batch(idx);
            const auto y = ctx.dataset->batch_labels(idx);

            ctx.model.params().zero_grad();
            const auto step = method_step_loss(ctx, config, x, y, method_rng, global_net ? &*global_net : nullptr,
                                               previous_net ? &*previous_net : nullptr);
            const double value = step.loss.item();
            if (!std::isfinite(value)) {
                throw DivergenceError("client_update: non-finite loss at epoch " + std::to_string(e));
            }
            backward(step.loss);
            if (opt.clip_norm) {
                clip_grad_norm(ctx.model.params(), *opt.clip_norm);
            }
            sgd_step(ctx.model.params(), opt);

            loss_sum += value * static_cast<double>(idx.size());
            correct += step.correct;
            ++result.metrics.steps;
            result.metrics.samples += idx.size();
        }
        result.metrics.epoch_loss.push_back(loss_sum / static_cast<double>(order.size()));
        result.metrics.epoch_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(order.size()));
    }
    result.params = ctx.model.params().to_vector();
    return result;
}

} // namespace fedalign

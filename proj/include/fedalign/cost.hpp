#pragma once

// Analytic compute and size accounting. FLOPs are 2 x multiply-accumulates of
// the convolution and dense layers, per sample, forward pass only.

#include <cstdint>

#include "fedalign/blocknet.hpp"
#include "fedalign/method.hpp"

namespace fedalign {

struct CostReport {
    double flops_per_forward = 0.0;  // stem, blocks and classifier
    double head_flops = 0.0;         // projection head, when present
    std::size_t param_count = 0;
};

namespace detail {

struct SpatialTrace {
    std::vector<std::size_t> in_channels;   // per block
    std::vector<std::size_t> out_hw;        // per block, output H*W
    std::vector<std::size_t> in_hw;         // per block, input H*W
    std::size_t stem_hw = 0;
};

inline std::size_t conv_out(std::size_t n, std::size_t k, std::size_t stride) {
    const std::size_t pad = k / 2;
    return (n + 2 * pad - k) / stride + 1;
}

inline SpatialTrace trace_spatial(const BlockNetSpec& spec) {
    SpatialTrace t;
    std::size_t h = conv_out(spec.input_shape[1], spec.kernel, 1);
    std::size_t w = conv_out(spec.input_shape[2], spec.kernel, 1);
    t.stem_hw = h * w;
    std::size_t c = spec.widths[0];
    for (std::size_t b = 0; b < spec.num_blocks(); ++b) {
        t.in_channels.push_back(c);
        t.in_hw.push_back(h * w);
        h = conv_out(h, spec.kernel, spec.stride(b));
        w = conv_out(w, spec.kernel, spec.stride(b));
        t.out_hw.push_back(h * w);
        c = spec.widths[b];
    }
    return t;
}

inline double block_flops(const BlockNetSpec& spec, const SpatialTrace& t, std::size_t b, std::size_t in_channels,
                          double omega) {
    const double k2 = static_cast<double>(spec.kernel * spec.kernel);
    const double out = static_cast<double>(pruned_width(spec.widths[b], omega));
    const double hw = static_cast<double>(t.out_hw[b]);
    return 2.0 * k2 * hw * (static_cast<double>(in_channels) * out + out * out);
}

inline double network_flops(const BlockNetSpec& spec, double omega, const std::vector<double>& block_weights = {}) {
    const auto t = trace_spatial(spec);
    const double k2 = static_cast<double>(spec.kernel * spec.kernel);
    std::size_t c = pruned_width(spec.widths[0], omega);
    double total = 2.0 * k2 * static_cast<double>(t.stem_hw * spec.input_shape[0] * c);
    for (std::size_t b = 0; b < spec.num_blocks(); ++b) {
        const double weight = block_weights.empty() ? 1.0 : block_weights[b];
        total += weight * block_flops(spec, t, b, c, omega);
        c = pruned_width(spec.widths[b], omega);
    }
    total += 2.0 * static_cast<double>(c * spec.num_classes);
    return total;
}

} // namespace detail

inline CostReport count_cost(const BlockNetSpec& spec) {
    spec.validate();
    CostReport r;
    r.flops_per_forward = detail::network_flops(spec, 1.0);

    const std::size_t k2 = spec.kernel * spec.kernel;
    const std::size_t norm = spec.normalize ? 2 : 0;
    std::size_t n = k2 * spec.input_shape[0] * spec.widths[0] + spec.widths[0] + norm * spec.widths[0];
    std::size_t in = spec.widths[0];
    for (auto w : spec.widths) {
        n += k2 * in * w + w + norm * w;
        n += k2 * w * w + w + norm * w;
        in = w;
    }
    n += in * spec.num_classes + spec.num_classes;
    if (spec.head_dim > 0) {
        const std::size_t h = spec.head_dim;
        n += in * h + h + h * h + h;
        r.head_flops = 2.0 * static_cast<double>(in * h + h * h);
    }
    r.param_count = n;
    return r;
}

/// FLOPs of the final block at width omega_S fed with full-width block L-1 features.
inline double subblock_flops(const BlockNetSpec& spec, double omega_S) {
    const auto t = detail::trace_spatial(spec);
    const auto last = spec.num_blocks() - 1;
    return detail::block_flops(spec, t, last, spec.widths[last - 1], omega_S);
}

/// FLOPs of the two channel Gram products X_F and X_S after spatial matching.
inline double transmitting_flops(const BlockNetSpec& spec, double omega_S) {
    const auto t = detail::trace_spatial(spec);
    const auto last = spec.num_blocks() - 1;
    const double rows = static_cast<double>(std::min(t.in_hw[last], t.out_hw[last]));
    const double c_prev = static_cast<double>(spec.widths[last - 1]);
    const double c_full = static_cast<double>(spec.widths[last]);
    const double c_sub = static_cast<double>(pruned_width(spec.widths[last], omega_S));
    return 2.0 * rows * c_prev * (c_full + c_sub);
}

/// Per-sample forward FLOPs of one local training step under a method.
/// Stochastic depth and GradAug report expectations (mean keep probability,
/// mean sub-network width).
inline double method_forward_flops(const BlockNetSpec& spec, const MethodConfig& m) {
    const auto base = count_cost(spec);
    switch (m.method) {
    case Method::fedavg:
    case Method::fedprox:
    case Method::mixup:
        return base.flops_per_forward;
    case Method::moon: {
        BlockNetSpec with_head = spec;
        if (with_head.head_dim == 0) with_head.head_dim = 64;
        return 3.0 * (base.flops_per_forward + count_cost(with_head).head_flops);
    }
    case Method::stochdepth: {
        std::vector<double> keep(spec.num_blocks());
        for (std::size_t b = 0; b < keep.size(); ++b) keep[b] = stochdepth_keep_prob(b + 1, spec.num_blocks(), m.gamma_L);
        return detail::network_flops(spec, 1.0, keep);
    }
    case Method::gradaug:
        return base.flops_per_forward +
               static_cast<double>(m.n_subnets) * detail::network_flops(spec, 0.5 * (m.omega_b + 1.0));
    case Method::fedalign:
        return base.flops_per_forward + subblock_flops(spec, m.omega_S) + transmitting_flops(spec, m.omega_S);
    }
    return base.flops_per_forward;
}

/// CIFAR-style ResNet56 layout: three stages of nine blocks, widths 16/32/64,
/// stride 2 entering stages two and three, 3x3 kernels on 32x32x3 inputs.
inline BlockNetSpec resnet56_like_spec(std::size_t num_classes = 100) {
    BlockNetSpec s;
    s.input_shape = {3, 32, 32};
    s.kernel = 3;
    s.num_classes = num_classes;
    s.widths.clear();
    s.strides.clear();
    for (std::size_t stage = 0; stage < 3; ++stage)
        for (std::size_t i = 0; i < 9; ++i) {
            s.widths.push_back(16u << stage);
            s.strides.push_back(stage > 0 && i == 0 ? 2 : 1);
        }
    return s;
}

} // namespace fedalign

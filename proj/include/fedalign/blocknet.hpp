#pragma once

// Residual block network with width-slimmable blocks.
//
//   stem:   conv(in -> widths[0]) -> norm -> relu
//   block:  relu( shortcut(x) + lambda * norm(conv(relu(norm(conv(x))))) )
//   head:   global average pool -> linear classifier
//
// Width pruning keeps the leading ceil(omega * c) channels of every layer.

#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "fedalign/ops.hpp"
#include "fedalign/params.hpp"
#include "fedalign/rng.hpp"

namespace fedalign {

struct BlockNetSpec {
    Shape input_shape{16, 1, 1};  // (channels, height, width) of one sample
    std::vector<std::size_t> widths{16, 16, 32};
    std::vector<std::size_t> strides{};  // per block; empty means all 1
    std::size_t num_classes = 8;
    std::size_t kernel = 1;  // 1 for feature vectors, 3 for images
    std::size_t norm_groups = 1;
    bool normalize = true;
    std::size_t head_dim = 0;  // projection head width; 0 disables the head

    std::size_t num_blocks() const { return widths.size(); }
    std::size_t stride(std::size_t block) const { return strides.empty() ? 1 : strides.at(block); }

    void validate() const {
        require(input_shape.size() == 3 && numel(input_shape) > 0, "BlockNetSpec: input_shape must be (C, H, W)");
        require(widths.size() >= 2, "BlockNetSpec: at least two blocks are required");
        require(strides.empty() || strides.size() == widths.size(), "BlockNetSpec: one stride per block");
        require(num_classes >= 2, "BlockNetSpec: at least two classes");
        require(kernel % 2 == 1, "BlockNetSpec: kernel size must be odd");
        for (auto w : widths) {
            require(w >= 1, "BlockNetSpec: widths must be positive");
            require(!normalize || w % norm_groups == 0, "BlockNetSpec: widths must be divisible by norm_groups");
        }
        for (std::size_t b = 0; b < widths.size(); ++b) require(stride(b) >= 1, "BlockNetSpec: strides must be positive");
    }
};

/// Channels kept when a layer of `channels` is pruned to fraction `omega`.
inline std::size_t pruned_width(std::size_t channels, double omega) {
    require(omega > 0.0 && omega <= 1.0, "width fraction must lie in (0, 1], got " + std::to_string(omega));
    const auto kept = static_cast<std::size_t>(std::ceil(omega * static_cast<double>(channels) - 1e-9));
    return std::max<std::size_t>(1, std::min(kept, channels));
}

/// Keep probability of block `l` (1-based) under the linear decay rule.
inline double stochdepth_keep_prob(std::size_t l, std::size_t num_blocks, double gamma_L) {
    return 1.0 - (static_cast<double>(l) / static_cast<double>(num_blocks)) * (1.0 - gamma_L);
}

struct BlockNetOutput {
    Tensor f_prev;  // output of block L-1
    Tensor f_last;  // output of block L
    Tensor logits;
};

class BlockNet {
  public:
    BlockNet() = default;

    BlockNet(BlockNetSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
        spec_.validate();
        Rng rng = make_rng(seed, {0x6e6574});
        const std::size_t k = spec_.kernel;
        auto conv = [&](const std::string& name, std::size_t in, std::size_t out) {
            const double std = std::sqrt(2.0 / static_cast<double>(in * k * k));
            params_.add(name + ".weight", Tensor::parameter({out, in, k, k}, normal_vector(rng, out * in * k * k, std)));
            params_.add(name + ".bias", Tensor::parameter({out}, std::vector<double>(out, 0.0)));
        };
        auto norm = [&](const std::string& name, std::size_t c) {
            if (!spec_.normalize) return;
            params_.add(name + ".gamma", Tensor::parameter({c}, std::vector<double>(c, 1.0)));
            params_.add(name + ".beta", Tensor::parameter({c}, std::vector<double>(c, 0.0)));
        };
        auto dense = [&](const std::string& name, std::size_t in, std::size_t out) {
            const double std = std::sqrt(1.0 / static_cast<double>(in));
            params_.add(name + ".weight", Tensor::parameter({out, in}, normal_vector(rng, out * in, std)));
            params_.add(name + ".bias", Tensor::parameter({out}, std::vector<double>(out, 0.0)));
        };

        conv("stem.conv", spec_.input_shape[0], spec_.widths[0]);
        norm("stem.norm", spec_.widths[0]);
        std::size_t in = spec_.widths[0];
        for (std::size_t b = 0; b < spec_.num_blocks(); ++b) {
            const auto w = spec_.widths[b];
            const auto p = block_prefix(b);
            conv(p + ".conv1", in, w);
            norm(p + ".norm1", w);
            conv(p + ".conv2", w, w);
            norm(p + ".norm2", w);
            in = w;
        }
        dense("fc", in, spec_.num_classes);
        if (spec_.head_dim > 0) {
            dense("proj1", in, spec_.head_dim);
            dense("proj2", spec_.head_dim, spec_.head_dim);
        }
    }

    const BlockNetSpec& spec() const { return spec_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }

    static std::string block_prefix(std::size_t b) {
        return (b < 10 ? "block0" : "block") + std::to_string(b);
    }

    /// Full-width forward exposing the last two block outputs.
    BlockNetOutput forward_with_features(const Tensor& x) const { return run(x, 1.0, {}, {}); }

    Tensor forward(const Tensor& x) const { return run(x, 1.0, {}, {}).logits; }

    /// Runs only the final block at width omega_S on the block L-1 features.
    Tensor forward_final_subblock(const Tensor& f_prev, double omega_S) const {
        const std::size_t last = spec_.num_blocks() - 1;
        require(f_prev.rank() == 4 && f_prev.dim(1) == spec_.widths[last - 1],
                "forward_final_subblock: features do not come from block L-1");
        return block(last, f_prev, omega_S, 1.0, true);
    }

    /// Forward with every layer uniformly pruned to fraction omega.
    Tensor forward_subnetwork(const Tensor& x, double omega) const { return run(x, omega, {}, {}).logits; }

    /// Training-mode stochastic depth: block l kept with probability gamma_l.
    std::pair<Tensor, std::vector<bool>> stochdepth_forward(const Tensor& x, double gamma_L, Rng& rng) const {
        require(gamma_L > 0.0 && gamma_L <= 1.0, "stochdepth: gamma_L must lie in (0, 1]");
        std::vector<bool> mask(spec_.num_blocks());
        for (std::size_t b = 0; b < mask.size(); ++b) {
            const double keep = stochdepth_keep_prob(b + 1, spec_.num_blocks(), gamma_L);
            mask[b] = uniform(rng) < keep;
        }
        return {forward_with_mask(x, mask), std::move(mask)};
    }

    Tensor forward_with_mask(const Tensor& x, const std::vector<bool>& mask) const {
        require(mask.size() == spec_.num_blocks(), "stochdepth mask must have one entry per block");
        return run(x, 1.0, mask, {}).logits;
    }

    /// Evaluation-mode stochastic depth: residual branches scaled by gamma_l.
    Tensor stochdepth_eval(const Tensor& x, double gamma_L) const {
        std::vector<double> scales(spec_.num_blocks());
        for (std::size_t b = 0; b < scales.size(); ++b) scales[b] = stochdepth_keep_prob(b + 1, spec_.num_blocks(), gamma_L);
        return run(x, 1.0, {}, scales).logits;
    }

    /// Two-layer projection head on pooled block-L features.
    Tensor project(const Tensor& f_last) const {
        require(spec_.head_dim > 0, "project: network was built without a projection head");
        const Tensor pooled = global_avg_pool(f_last);
        const Tensor h = relu(linear(pooled, params_.at("proj1.weight"), params_.at("proj1.bias")));
        return linear(h, params_.at("proj2.weight"), params_.at("proj2.bias"));
    }

  private:
    Tensor conv_layer(const std::string& name, const Tensor& x, std::size_t out, std::size_t stride) const {
        Tensor w = params_.at(name + ".weight");
        Tensor b = params_.at(name + ".bias");
        if (out < w.dim(0)) {
            w = narrow(w, 0, out);
            b = narrow(b, 0, out);
        }
        if (x.dim(1) < w.dim(1)) {
            w = narrow(w, 1, x.dim(1));
        }
        return conv2d(x, w, b, stride, spec_.kernel / 2);
    }

    Tensor norm_layer(const std::string& name, const Tensor& x) const {
        if (!spec_.normalize) return x;
        Tensor g = params_.at(name + ".gamma");
        Tensor b = params_.at(name + ".beta");
        if (x.dim(1) < g.numel()) {
            g = narrow(g, 0, x.dim(1));
            b = narrow(b, 0, x.dim(1));
        }
        // pruned widths need not divide the group count
        return group_norm(x, g, b, std::gcd(spec_.norm_groups, x.dim(1)));
    }

    Tensor block(std::size_t b, const Tensor& x, double omega, double branch_scale, bool keep) const {
        const auto out = pruned_width(spec_.widths[b], omega);
        const Tensor shortcut = identity_shortcut(x, out, spec_.stride(b));
        if (!keep) {
            return relu(shortcut);
        }
        const auto p = block_prefix(b);
        Tensor h = relu(norm_layer(p + ".norm1", conv_layer(p + ".conv1", x, out, spec_.stride(b))));
        h = norm_layer(p + ".norm2", conv_layer(p + ".conv2", h, out, 1));
        if (branch_scale != 1.0) {
            h = scale(h, branch_scale);
        }
        return relu(add(h, shortcut));
    }

    BlockNetOutput run(const Tensor& x, double omega, const std::vector<bool>& mask,
                       const std::vector<double>& scales) const {
        require(x.rank() == 4 && x.dim(0) >= 1 &&
                    Shape(x.shape().begin() + 1, x.shape().end()) == spec_.input_shape,
                "BlockNet: input " + to_string(x.shape()) + " does not match (B, " + to_string(spec_.input_shape) + ")");
        Tensor h = relu(norm_layer("stem.norm", conv_layer("stem.conv", x, pruned_width(spec_.widths[0], omega), 1)));
        BlockNetOutput out;
        for (std::size_t b = 0; b < spec_.num_blocks(); ++b) {
            const bool keep = mask.empty() || mask[b];
            const double s = scales.empty() ? 1.0 : scales[b];
            h = block(b, h, omega, s, keep);
            if (b + 2 == spec_.num_blocks()) out.f_prev = h;
        }
        out.f_last = h;
        const Tensor pooled = global_avg_pool(h);
        Tensor w = params_.at("fc.weight");
        if (pooled.dim(1) < w.dim(1)) {
            w = narrow(w, 1, pooled.dim(1));
        }
        out.logits = linear(pooled, w, params_.at("fc.bias"));
        return out;
    }

    BlockNetSpec spec_;
    ParamSet params_;
};

} // namespace fedalign

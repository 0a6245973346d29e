#pragma once

// Synthetic data, non-IID client partitioning and input augmentations.

#include <algorithm>
#include <array>
#include <limits>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedalign/ops.hpp"
#include "fedalign/rng.hpp"

namespace fedalign {

struct LabeledDataset {
    Shape sample_shape;          // (C, H, W)
    std::vector<double> inputs;  // size() * numel(sample_shape), row-major
    std::vector<int> labels;
    std::size_t num_classes = 0;

    std::size_t size() const { return labels.size(); }
    std::size_t sample_size() const { return numel(sample_shape); }

    void validate() const {
        require(!labels.empty(), "dataset is empty");
        require(sample_shape.size() == 3, "dataset samples must be (C, H, W)");
        require(inputs.size() == size() * sample_size(), "dataset inputs do not match the label count");
        for (int y : labels) {
            require(y >= 0 && static_cast<std::size_t>(y) < num_classes, "dataset label out of range");
        }
    }

    /// Stacks the selected samples into a (B, C, H, W) constant tensor.
    Tensor batch(std::span<const std::size_t> idx) const {
        const std::size_t d = sample_size();
        std::vector<double> out(idx.size() * d);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            require(idx[i] < size(), "dataset index out of range");
            std::copy_n(inputs.begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d,
                        out.begin() + static_cast<std::ptrdiff_t>(i * d));
        }
        Shape shape{idx.size()};
        shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
        return Tensor::constant(std::move(shape), std::move(out));
    }

    std::vector<int> batch_labels(std::span<const std::size_t> idx) const {
        std::vector<int> out(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels.at(idx[i]);
        return out;
    }

    LabeledDataset subset(std::span<const std::size_t> idx) const {
        LabeledDataset out{sample_shape, {}, batch_labels(idx), num_classes};
        const Tensor x = batch(idx);
        out.inputs.assign(x.values().begin(), x.values().end());
        return out;
    }

    std::vector<std::size_t> all_indices() const {
        std::vector<std::size_t> idx(size());
        std::iota(idx.begin(), idx.end(), 0);
        return idx;
    }
};

struct SyntheticSpec {
    std::size_t num_classes = 8;
    std::size_t dims = 16;
    std::size_t samples_per_class = 100;
    double separation = 4.0;  // minimum pairwise distance of class means, in noise std units
    std::size_t image_side = 0;  // >0 lays each sample out as a 1 x side x side image (dims = side^2)
};

/// Isotropic unit-variance Gaussian mixture with one component per class.
inline LabeledDataset make_synthetic_mixture(const SyntheticSpec& spec, std::uint64_t seed) {
    require(spec.num_classes >= 1 && spec.samples_per_class >= 1, "synthetic mixture: counts must be positive");
    const std::size_t dims = spec.image_side > 0 ? spec.image_side * spec.image_side : spec.dims;
    require(dims >= 1, "synthetic mixture: dims must be positive");
    require(spec.separation >= 0.0, "synthetic mixture: separation must be non-negative");

    Rng rng = make_rng(seed, {0x6d6978});
    std::vector<double> means = normal_vector(rng, spec.num_classes * dims);
    double min_dist = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < spec.num_classes; ++a)
        for (std::size_t b = a + 1; b < spec.num_classes; ++b) {
            double d2 = 0.0;
            for (std::size_t j = 0; j < dims; ++j) {
                const double diff = means[a * dims + j] - means[b * dims + j];
                d2 += diff * diff;
            }
            min_dist = std::min(min_dist, std::sqrt(d2));
        }
    const double s = spec.num_classes < 2 ? 0.0 : (min_dist > 0.0 ? spec.separation / min_dist : 0.0);
    for (auto& m : means) m *= s;

    LabeledDataset ds;
    ds.sample_shape = spec.image_side > 0 ? Shape{1, spec.image_side, spec.image_side} : Shape{dims, 1, 1};
    ds.num_classes = spec.num_classes;
    ds.inputs.reserve(spec.num_classes * spec.samples_per_class * dims);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t i = 0; i < spec.samples_per_class; ++i)
        for (std::size_t k = 0; k < spec.num_classes; ++k) {
            for (std::size_t j = 0; j < dims; ++j) ds.inputs.push_back(means[k * dims + j] + noise(rng));
            ds.labels.push_back(static_cast<int>(k));
        }
    return ds;
}

struct TrainTestSplit {
    LabeledDataset train;
    LabeledDataset test;
};

/// Stratified split: within each class, a shuffled `test_fraction` goes to test.
inline TrainTestSplit split_train_test(const LabeledDataset& ds, double test_fraction, std::uint64_t seed) {
    require(test_fraction > 0.0 && test_fraction < 1.0, "test_fraction must lie in (0, 1)");
    Rng rng = make_rng(seed, {0x73706c});
    std::vector<std::size_t> train_idx, test_idx;
    for (std::size_t k = 0; k < ds.num_classes; ++k) {
        std::vector<std::size_t> cls;
        for (std::size_t i = 0; i < ds.size(); ++i)
            if (static_cast<std::size_t>(ds.labels[i]) == k) cls.push_back(i);
        std::shuffle(cls.begin(), cls.end(), rng);
        const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(cls.size())));
        test_idx.insert(test_idx.end(), cls.begin(), cls.begin() + static_cast<std::ptrdiff_t>(n_test));
        train_idx.insert(train_idx.end(), cls.begin() + static_cast<std::ptrdiff_t>(n_test), cls.end());
    }
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(test_idx.begin(), test_idx.end());
    return {ds.subset(train_idx), ds.subset(test_idx)};
}

// ---------------------------------------------------------------- partitioning

struct Partition {
    std::vector<std::vector<std::size_t>> assignments;  // sorted indices per client
    double alpha = 0.0;  // 0 denotes a homogeneous (IID) split
    std::uint64_t seed = 0;

    std::size_t num_clients() const { return assignments.size(); }

    std::vector<std::size_t> counts() const {
        std::vector<std::size_t> n;
        for (const auto& a : assignments) n.push_back(a.size());
        return n;
    }

    /// Row per client, column per class.
    std::vector<std::vector<std::size_t>> class_counts(std::span<const int> labels, std::size_t num_classes) const {
        std::vector<std::vector<std::size_t>> m(num_clients(), std::vector<std::size_t>(num_classes, 0));
        for (std::size_t c = 0; c < num_clients(); ++c)
            for (auto i : assignments[c]) ++m[c][static_cast<std::size_t>(labels[i])];
        return m;
    }

    bool operator==(const Partition&) const = default;
};

class PartitionError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Integer counts summing to `total` proportional to `p`, by largest remainder
/// (ties to the lower index).
inline std::vector<std::size_t> largest_remainder(std::span<const double> p, std::size_t total) {
    std::vector<std::size_t> out(p.size());
    std::vector<std::pair<double, std::size_t>> rem(p.size());
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double q = p[i] * static_cast<double>(total);
        out[i] = static_cast<std::size_t>(std::floor(q));
        assigned += out[i];
        rem[i] = {q - std::floor(q), i};
    }
    // Floating error can push the floors past the total; trim from the smallest remainders.
    std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t r = 0; assigned < total; r = (r + 1) % rem.size()) {
        ++out[rem[r].second];
        ++assigned;
    }
    for (std::size_t r = rem.size(); assigned > total && r-- > 0;) {
        if (out[rem[r].second] > 0) {
            --out[rem[r].second];
            --assigned;
        }
    }
    return out;
}

inline constexpr int kPartitionRedraws = 100;

/// Per-class Dirichlet allocation of sample indices to clients. A draw that
/// leaves any client without samples is discarded and redrawn.
inline Partition dirichlet_partition(std::span<const int> labels, std::size_t num_clients, double alpha,
                                     std::uint64_t seed) {
    require(num_clients >= 1, "dirichlet_partition: need at least one client");
    require(alpha > 0.0, "dirichlet_partition: alpha must be positive");
    require(!labels.empty(), "dirichlet_partition: no labels");
    require(labels.size() >= num_clients, "dirichlet_partition: fewer samples than clients");
    int max_label = 0;
    for (int y : labels) {
        require(y >= 0, "dirichlet_partition: negative label");
        max_label = std::max(max_label, y);
    }
    const auto num_classes = static_cast<std::size_t>(max_label) + 1;
    std::vector<std::vector<std::size_t>> by_class(num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[static_cast<std::size_t>(labels[i])].push_back(i);

    for (int attempt = 0; attempt < kPartitionRedraws; ++attempt) {
        Rng rng = make_rng(seed, {0x646972, static_cast<std::uint64_t>(attempt)});
        std::gamma_distribution<double> gamma(alpha, 1.0);
        Partition part;
        part.alpha = alpha;
        part.seed = seed;
        part.assignments.assign(num_clients, {});
        bool degenerate = false;
        for (const auto& cls : by_class) {
            if (cls.empty()) continue;
            std::vector<double> p(num_clients);
            double total = 0.0;
            for (auto& x : p) {
                x = gamma(rng);
                total += x;
            }
            if (!(total > 0.0)) {
                degenerate = true;
                break;
            }
            for (auto& x : p) x /= total;
            std::vector<std::size_t> shuffled = cls;
            std::shuffle(shuffled.begin(), shuffled.end(), rng);
            const auto counts = largest_remainder(p, shuffled.size());
            std::size_t pos = 0;
            for (std::size_t c = 0; c < num_clients; ++c) {
                for (std::size_t j = 0; j < counts[c]; ++j) part.assignments[c].push_back(shuffled[pos++]);
            }
        }
        if (degenerate) continue;
        if (std::any_of(part.assignments.begin(), part.assignments.end(), [](const auto& a) { return a.empty(); })) {
            continue;
        }
        for (auto& a : part.assignments) std::sort(a.begin(), a.end());
        return part;
    }
    throw PartitionError("dirichlet_partition: every one of " + std::to_string(kPartitionRedraws) +
                         " draws left a client without samples");
}

/// Homogeneous split: shuffled indices dealt into near-equal shards.
inline Partition iid_partition(std::size_t n, std::size_t num_clients, std::uint64_t seed) {
    require(num_clients >= 1 && n >= num_clients, "iid_partition: need at least one sample per client");
    Rng rng = make_rng(seed, {0x696964});
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    Partition part;
    part.alpha = 0.0;
    part.seed = seed;
    part.assignments.assign(num_clients, {});
    for (std::size_t i = 0; i < n; ++i) part.assignments[i % num_clients].push_back(idx[i]);
    for (auto& a : part.assignments) std::sort(a.begin(), a.end());
    return part;
}

// ---------------------------------------------------------------- augmentation

struct MixedBatch {
    Tensor inputs;
    std::vector<int> labels_a;
    std::vector<int> labels_b;
    double beta = 1.0;
};

/// x = beta * x_a + (1 - beta) * x_b for a given beta.
inline MixedBatch mixup_with_beta(const Tensor& xa, std::span<const int> ya, const Tensor& xb, std::span<const int> yb,
                                  double beta) {
    require(xa.shape() == xb.shape(), "mixup: batch shapes differ");
    require(ya.size() == yb.size() && ya.size() == xa.dim(0), "mixup: label counts differ from the batch");
    require(beta >= 0.0 && beta <= 1.0, "mixup: beta must lie in [0, 1]");
    std::vector<double> out(xa.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = beta * xa.values()[i] + (1.0 - beta) * xb.values()[i];
    return {Tensor::constant(xa.shape(), std::move(out)), {ya.begin(), ya.end()}, {yb.begin(), yb.end()}, beta};
}

/// Mixup with one beta ~ Beta(gamma, gamma) for the whole batch.
inline MixedBatch mixup_batch(const Tensor& xa, std::span<const int> ya, const Tensor& xb, std::span<const int> yb,
                              double gamma, Rng& rng) {
    require(gamma > 0.0, "mixup: gamma must be positive");
    return mixup_with_beta(xa, ya, xb, yb, beta_sample(rng, gamma, gamma));
}

inline constexpr std::array<double, 3> kResolutionScales = {1.0, 0.75, 0.5};

/// Resolution scaling: adaptive average pooling to scale*size followed by
/// nearest-neighbour upsampling to the original size. Inputs without spatial
/// extent get additive Gaussian noise with std (1 - scale) * 0.1 instead.
inline Tensor downsample_transform(const Tensor& x, double scale, Rng& rng) {
    require(x.rank() == 4, "downsample_transform: expected a (B, C, H, W) batch");
    require(scale > 0.0 && scale <= 1.0, "downsample_transform: scale must lie in (0, 1]");
    if (scale == 1.0) {
        return x.detach();
    }
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H == 1 && W == 1) {
        const double sd = (1.0 - scale) * 0.1;
        std::vector<double> out(x.values().begin(), x.values().end());
        std::normal_distribution<double> noise(0.0, sd);
        for (auto& v : out) v += noise(rng);
        return Tensor::constant(x.shape(), std::move(out));
    }
    const auto oh = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(scale * static_cast<double>(H))));
    const auto ow = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(scale * static_cast<double>(W))));
    const Tensor pooled = adaptive_avg_pool2d(x.detach(), oh, ow);
    std::vector<double> out(x.numel());
    for (std::size_t bc = 0; bc < B * C; ++bc)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xx = 0; xx < W; ++xx) {
                const std::size_t sy = y * oh / H, sx = xx * ow / W;
                out[(bc * H + y) * W + xx] = pooled.values()[(bc * oh + sy) * ow + sx];
            }
    return Tensor::constant(x.shape(), std::move(out));
}

} // namespace fedalign

#include <gtest/gtest.h>

#include <cmath>

#include "fedalign/blocknet.hpp"
#include "fedalign/cost.hpp"
#include "fedalign/rng.hpp"
#include "oracles.hpp"

using namespace fedalign;

namespace {

Tensor random_input(const BlockNetSpec& spec, std::size_t batch, std::uint64_t seed) {
    Rng rng = make_rng(seed);
    Shape s = {batch};
    s.insert(s.end(), spec.input_shape.begin(), spec.input_shape.end());
    return Tensor::constant(s, normal_vector(rng, numel(s)));
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

BlockNetSpec image_spec() {
    BlockNetSpec s;
    s.input_shape = {1, 8, 8};
    s.kernel = 3;
    s.widths = {8, 8, 16};
    s.strides = {1, 2, 1};
    s.norm_groups = 2;
    return s;
}

} // namespace

TEST(BlockNet, FeatureShapes) {
    BlockNetSpec spec;
    BlockNet net(spec, 1);
    const auto out = net.forward_with_features(random_input(spec, 1, 2));
    EXPECT_EQ(out.f_prev.dim(1), spec.widths[1]);
    EXPECT_EQ(out.f_last.dim(1), spec.widths[2]);
    EXPECT_EQ(out.logits.shape(), (Shape{1, spec.num_classes}));
}

TEST(BlockNet, ImageFeatureShapes) {
    const auto spec = image_spec();
    BlockNet net(spec, 1);
    const auto out = net.forward_with_features(random_input(spec, 3, 2));
    EXPECT_EQ(out.f_prev.shape(), (Shape{3, 8, 4, 4}));
    EXPECT_EQ(out.f_last.shape(), (Shape{3, 16, 4, 4}));
}

TEST(BlockNet, ForwardIsPure) {
    BlockNetSpec spec;
    BlockNet net(spec, 1);
    const auto x = random_input(spec, 4, 3);
    EXPECT_TRUE(bitwise_equal(net.forward(x), net.forward(x)));
}

TEST(BlockNet, ZeroClassifierGivesZeroLogits) {
    BlockNetSpec spec;
    BlockNet net(spec, 1);
    for (const auto& [name, t] : net.params()) {
        if (name.rfind("fc.", 0) == 0) {
            Tensor p = t;
            for (auto& v : p.mutable_values()) v = 0.0;
        }
    }
    const Tensor logits = net.forward(random_input(spec, 2, 3));
    for (double v : logits.values()) EXPECT_EQ(v, 0.0);
}

TEST(BlockNet, InputShapeMismatchThrows) {
    BlockNetSpec spec;
    BlockNet net(spec, 1);
    EXPECT_THROW(net.forward(Tensor::zeros({1, 3, 1, 1})), ContractViolation);
}

TEST(BlockNet, InitIsDeterministic) {
    BlockNetSpec spec;
    EXPECT_EQ(BlockNet(spec, 5).params().to_vector(), BlockNet(spec, 5).params().to_vector());
    EXPECT_EQ(BlockNet(spec, 5).params().layout(), BlockNet(spec, 6).params().layout());
}

TEST(BlockNet, SpecNeedsTwoBlocks) {
    BlockNetSpec spec;
    spec.widths = {16};
    EXPECT_THROW(BlockNet(spec, 1), ContractViolation);
}

TEST(BlockNet, FinalSubblockAtFullWidthMatches) {
    for (const auto& spec : {BlockNetSpec{}, image_spec()}) {
        BlockNet net(spec, 4);
        const auto out = net.forward_with_features(random_input(spec, 3, 5));
        EXPECT_TRUE(bitwise_equal(net.forward_final_subblock(out.f_prev, 1.0), out.f_last));
    }
}

TEST(BlockNet, FinalSubblockWidths) {
    BlockNetSpec spec;
    spec.widths = {16, 16, 16};
    BlockNet net(spec, 4);
    const auto out = net.forward_with_features(random_input(spec, 2, 5));
    EXPECT_EQ(net.forward_final_subblock(out.f_prev, 0.25).dim(1), 4u);
    EXPECT_EQ(net.forward_final_subblock(out.f_prev, 0.4).dim(1), 7u);
    EXPECT_EQ(net.forward_final_subblock(out.f_prev, 0.25).dim(2), out.f_last.dim(2));
    EXPECT_THROW(net.forward_final_subblock(out.f_prev, 0.0), ContractViolation);
    EXPECT_THROW(net.forward_final_subblock(out.f_prev, 1.5), ContractViolation);
}

TEST(BlockNet, PrunedWidthUsesCeiling) {
    EXPECT_EQ(pruned_width(16, 0.25), 4u);
    EXPECT_EQ(pruned_width(16, 0.4), 7u);
    EXPECT_EQ(pruned_width(16, 0.1), 2u);
    EXPECT_EQ(pruned_width(10, 0.3), 3u);
    EXPECT_EQ(pruned_width(3, 0.01), 1u);
}

TEST(BlockNet, SubnetworkAtFullWidthMatches) {
    const auto spec = image_spec();
    BlockNet net(spec, 4);
    const auto x = random_input(spec, 2, 6);
    EXPECT_TRUE(bitwise_equal(net.forward_subnetwork(x, 1.0), net.forward(x)));
    // 0.9 of 16 channels is 15, which the norm layers split into gcd(2, 15) = 1 group.
    EXPECT_TRUE(bitwise_equal(net.forward_subnetwork(x, 0.9), net.forward_subnetwork(x, 0.9)));
}

// A narrower network built from the prefix channels of every layer must give
// the same logits as the pruned forward of the wide one.
TEST(BlockNet, SubnetworkUsesPrefixChannels) {
    BlockNetSpec wide;
    wide.widths = {10, 10, 20};
    wide.norm_groups = 1;
    const double omega = 0.8;
    BlockNetSpec narrow_spec = wide;
    narrow_spec.widths = {8, 8, 16};
    BlockNet big(wide, 7);
    BlockNet small(narrow_spec, 8);
    for (const auto& [name, t] : small.params()) {
        const Tensor& src = big.params().at(name);
        Tensor dst = t;
        auto out = dst.mutable_values();
        const auto& ds = dst.shape();
        const auto& ss = src.shape();
        const std::size_t inner_dst = ds.size() > 1 ? numel(Shape(ds.begin() + 1, ds.end())) : 1;
        const std::size_t inner_src = ss.size() > 1 ? numel(Shape(ss.begin() + 1, ss.end())) : 1;
        const std::size_t cols_dst = ds.size() > 1 ? ds[1] : 1;
        const std::size_t cols_src = ss.size() > 1 ? ss[1] : 1;
        const std::size_t tail = ds.size() > 2 ? numel(Shape(ds.begin() + 2, ds.end())) : 1;
        for (std::size_t o = 0; o < ds[0]; ++o)
            for (std::size_t i = 0; i < cols_dst; ++i)
                for (std::size_t k = 0; k < tail; ++k) {
                    out[o * inner_dst + i * tail + k] = src.values()[o * inner_src + i * (inner_src / cols_src) + k];
                }
    }
    const auto x = random_input(wide, 3, 9);
    const auto a = big.forward_subnetwork(x, omega);
    const auto b = small.forward(x);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.values()[i], b.values()[i], 1e-12);
}

TEST(StochDepth, KeepProbabilityFormula) {
    EXPECT_DOUBLE_EQ(stochdepth_keep_prob(5, 10, 0.9), 0.95);
    EXPECT_DOUBLE_EQ(stochdepth_keep_prob(10, 10, 0.9), 0.9);
}

TEST(StochDepth, GammaOneKeepsEverything) {
    BlockNetSpec spec;
    BlockNet net(spec, 2);
    const auto x = random_input(spec, 2, 3);
    Rng rng = make_rng(1);
    auto [logits, mask] = net.stochdepth_forward(x, 1.0, rng);
    for (bool m : mask) EXPECT_TRUE(m);
    EXPECT_TRUE(bitwise_equal(logits, net.forward(x)));
}

TEST(StochDepth, AllKeepMaskEqualsForward) {
    const auto spec = image_spec();
    BlockNet net(spec, 2);
    const auto x = random_input(spec, 2, 3);
    EXPECT_TRUE(bitwise_equal(net.forward_with_mask(x, {true, true, true}), net.forward(x)));
}

TEST(StochDepth, EmpiricalKeepFrequency) {
    BlockNetSpec spec;
    spec.widths = {4, 4, 4, 4, 4};
    BlockNet net(spec, 2);
    const auto x = random_input(spec, 1, 3);
    Rng rng = make_rng(17);
    std::vector<int> kept(5, 0);
    for (int i = 0; i < 10000; ++i) {
        auto [_, mask] = net.stochdepth_forward(x, 0.5, rng);
        for (std::size_t b = 0; b < 5; ++b) kept[b] += mask[b];
    }
    for (std::size_t b = 0; b < 5; ++b) {
        EXPECT_NEAR(kept[b] / 10000.0, stochdepth_keep_prob(b + 1, 5, 0.5), 0.02);
    }
}

TEST(StochDepth, DroppedBlockPassesIdentity) {
    BlockNetSpec spec;
    spec.widths = {6, 6};
    BlockNet net(spec, 2);
    const auto x = random_input(spec, 2, 3);
    const auto dropped = net.forward_with_mask(x, {false, false});
    EXPECT_FALSE(bitwise_equal(dropped, net.forward(x)));
    EXPECT_THROW(net.forward_with_mask(x, {true}), ContractViolation);
}

TEST(StochDepth, EvalScalesBranches) {
    BlockNetSpec spec;
    BlockNet net(spec, 2);
    const auto x = random_input(spec, 2, 3);
    EXPECT_TRUE(bitwise_equal(net.stochdepth_eval(x, 1.0), net.forward(x)));
    EXPECT_FALSE(bitwise_equal(net.stochdepth_eval(x, 0.5), net.forward(x)));
}

TEST(BlockNet, ProjectionHead) {
    BlockNetSpec spec;
    spec.head_dim = 64;
    BlockNet net(spec, 2);
    const auto out = net.forward_with_features(random_input(spec, 3, 3));
    EXPECT_EQ(net.project(out.f_last).shape(), (Shape{3, 64}));
    BlockNet plain(BlockNetSpec{}, 2);
    EXPECT_THROW(plain.project(out.f_last), ContractViolation);
}

TEST(BlockNet, EndToEndGradientsMatchFiniteDifferences) {
    auto spec = image_spec();
    spec.widths = {2, 2, 3};
    spec.norm_groups = 1;
    BlockNet net(spec, 3);
    const auto x = random_input(spec, 2, 4);
    const std::vector<int> y = {1, 5};
    std::vector<Tensor> ps;
    for (const auto& [_, t] : net.params()) ps.push_back(t);
    auto loss = [&] { return cross_entropy(net.forward(x), y); };
    EXPECT_LE(testing_oracles::max_gradient_error(ps, loss), 1e-4);
}

TEST(Cost, DenseLayerExample) {
    // A 10 -> 5 dense layer: the classifier of a network whose blocks are free.
    BlockNetSpec spec;
    spec.input_shape = {10, 1, 1};
    spec.widths = {10, 10};
    spec.num_classes = 5;
    spec.normalize = false;
    const auto all = count_cost(spec);
    spec.num_classes = 2;
    const auto two = count_cost(spec);
    EXPECT_EQ(all.param_count - two.param_count, 55u - 22u);
    EXPECT_DOUBLE_EQ(all.flops_per_forward - two.flops_per_forward, 100.0 - 40.0);
}

TEST(Cost, ParamCountMatchesModel) {
    for (auto spec : {BlockNetSpec{}, image_spec()}) {
        for (std::size_t head : {0, 64}) {
            spec.head_dim = head;
            EXPECT_EQ(count_cost(spec).param_count, BlockNet(spec, 1).params().to_vector().data.size());
        }
    }
}

TEST(Cost, FlopsMatchMeasuredMacs) {
    for (const auto& spec : {BlockNetSpec{}, image_spec(), resnet56_like_spec(10)}) {
        BlockNet net(spec, 1);
        const auto x = random_input(spec, 1, 2);
        MacScope scope;
        net.forward(x);
        EXPECT_DOUBLE_EQ(count_cost(spec).flops_per_forward, 2.0 * static_cast<double>(scope.macs()));
    }
}

TEST(Cost, FedAlignOverheadMatchesMeasuredSubblock) {
    const auto spec = image_spec();
    BlockNet net(spec, 1);
    const auto x = random_input(spec, 1, 2);
    const auto out = net.forward_with_features(x);
    MacScope scope;
    net.forward_final_subblock(out.f_prev, 0.25);
    EXPECT_DOUBLE_EQ(subblock_flops(spec, 0.25), 2.0 * static_cast<double>(scope.macs()));
}

TEST(Cost, ResNetLikeRatios) {
    const auto spec = resnet56_like_spec();
    const double base = count_cost(spec).flops_per_forward;
    const double fa = method_forward_flops(spec, MethodConfig::defaults(Method::fedalign));
    const double moon = method_forward_flops(spec, MethodConfig::defaults(Method::moon));
    EXPECT_NEAR(fa / base, 1.02, 0.05);
    EXPECT_NEAR(moon / base, 3.0, 0.05);
    EXPECT_EQ(method_forward_flops(spec, MethodConfig::defaults(Method::fedprox)), base);
}

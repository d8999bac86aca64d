#include <gtest/gtest.h>

#include <cmath>

#include "layersync/backbone.hpp"
#include "layersync/gradcheck.hpp"
#include "layersync/regularizers.hpp"

using namespace layersync;

namespace {

Tensor randn_tensor(Shape shape, std::uint64_t seed) {
    CounterRng rng(seed, 0, Purpose::eval);
    return randn<double>(std::move(shape), rng);
}

}  // namespace

TEST(LayerSyncLoss, IdenticalIsMinusOne) {
    auto z = randn_tensor({3, 5, 8}, 1);
    EXPECT_NEAR(layersync_loss(z, z).item(), -1.0, 1e-10);
}

TEST(LayerSyncLoss, OrthogonalIsZero) {
    auto a = Tensor({1, 2, 2}, {1, 0, 0, 2});
    auto b = Tensor({1, 2, 2}, {0, 3, -1, 0});
    EXPECT_EQ(layersync_loss(a, b).item(), 0.0);
}

TEST(LayerSyncLoss, HandExample) {
    auto zk = Tensor({1, 2, 2}, {1, 0, 1, 1});
    auto zr = Tensor({1, 2, 2}, {1, 0, -1, 1});
    EXPECT_NEAR(layersync_loss(zk, zr).item(), -0.5, 1e-10);
}

TEST(LayerSyncLoss, ZeroPatchIsGuarded) {
    auto zk = Tensor::zeros({1, 2, 3});
    auto zr = randn_tensor({1, 2, 3}, 2);
    const double v = layersync_loss(zk, zr).item();
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_EQ(v, 0.0);
}

TEST(LayerSyncLoss, ShapeMismatch) {
    EXPECT_THROW(layersync_loss(Tensor::zeros({1, 2, 3}), Tensor::zeros({1, 3, 3})), ShapeError);
}

TEST(LayerSyncLoss, BoundedAndScaleInvariant) {
    CounterRng rng(3, 0, Purpose::eval);
    for (int trial = 0; trial < 50; ++trial) {
        auto zk = randn<double>({2, 4, 6}, rng), zr = randn<double>({2, 4, 6}, rng);
        const double base = layersync_loss(zk, zr).item();
        EXPECT_GE(base, -1.0 - 1e-12);
        EXPECT_LE(base, 1.0 + 1e-12);
        std::vector<double> s(8);
        for (auto& v : s) v = 0.1 + 5.0 * rng.uniform();
        auto a = Tensor({2, 4, 1}, s);
        EXPECT_NEAR(layersync_loss(zk * a, zr).item(), base, 1e-12);
        EXPECT_NEAR(layersync_loss(zk, zr * a).item(), base, 1e-12);
    }
}

TEST(LayerSyncLoss, MinusOneOnlyForColinearPatches) {
    auto zk = randn_tensor({2, 3, 4}, 4);
    auto scaled = zk * Tensor({2, 3, 1}, {1, 2, 3, 0.5, 0.25, 7});
    EXPECT_NEAR(layersync_loss(zk, scaled).item(), -1.0, 1e-10);
    auto flipped = zk * Tensor({2, 3, 1}, {1, 2, 3, 0.5, -0.25, 7});
    EXPECT_GT(layersync_loss(zk, flipped).item(), -1.0 + 0.1);
}

TEST(LayerSyncLoss, NoGradientIntoReference) {
    auto zk = randn_tensor({2, 3, 4}, 5), zr = randn_tensor({2, 3, 4}, 6);
    zk.set_requires_grad(true);
    zr.set_requires_grad(true);
    Tape tape;
    TapeScope<double> scope(tape);
    tape.backward(layersync_loss(zk, zr));
    EXPECT_FALSE(zr.has_grad());
    double norm = 0;
    for (double g : zk.grad()) norm += g * g;
    EXPECT_GT(norm, 0.0);
}

TEST(LayerSyncLoss, GradientMatchesFiniteDifferences) {
    auto zk = randn_tensor({2, 3, 4}, 7);
    const auto zr = randn_tensor({2, 3, 4}, 8);
    auto r = finite_difference_check([&] { return layersync_loss(zk, zr); }, zk);
    EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(CombinedLoss, LambdaZeroIsVelocityLossBitwise) {
    auto x0 = randn_tensor({2, 1, 2, 2}, 9), eps = randn_tensor({2, 1, 2, 2}, 10), v = randn_tensor({2, 1, 2, 2}, 11);
    std::map<int, Tensor> reps{{1, randn_tensor({2, 4, 3}, 12)}, {3, randn_tensor({2, 4, 3}, 13)}};
    std::vector<double> t{0.2, 0.6};
    auto terms = combined_loss(v, x0, eps, t, reps, LayerPair{1, 3, 0.0});
    EXPECT_EQ(terms.total.item(), velocity_loss(v, x0, eps, t).item());
}

TEST(CombinedLoss, PerfectPredictionGivesMinusLambda) {
    auto x0 = randn_tensor({2, 1, 2, 2}, 14), eps = randn_tensor({2, 1, 2, 2}, 15);
    std::vector<double> t{0.3, 0.9};
    auto z = randn_tensor({2, 4, 3}, 16);
    auto terms = combined_loss(velocity_target(x0, eps, t), x0, eps, t, {{1, z}, {3, z}}, LayerPair{1, 3, 0.3});
    EXPECT_NEAR(terms.total.item(), -0.3, 1e-10);
}

TEST(CombinedLoss, HandComputedSum) {
    // velocity: x0 - eps = [1, 1], v = [0, 3] -> squared errors 1, 4 -> 2.5
    // sync: example above -> -0.5; total 2.5 + 0.2 * -0.5 = 2.4
    auto x0 = Tensor({2, 1}, {1, 2}), eps = Tensor({2, 1}, {0, 1}), v = Tensor({2, 1}, {0, 3});
    std::map<int, Tensor> reps{{2, Tensor({1, 2, 2}, {1, 0, 1, 1})}, {5, Tensor({1, 2, 2}, {1, 0, -1, 1})}};
    auto terms = combined_loss(v, x0, eps, {0.5, 0.5}, reps, LayerPair{2, 5, 0.2});
    EXPECT_NEAR(terms.velocity.item(), 2.5, 1e-15);
    EXPECT_NEAR(terms.sync.item(), -0.5, 1e-10);
    EXPECT_NEAR(terms.total.item(), 2.4, 1e-10);
}

TEST(CombinedLoss, MissingTap) {
    auto x = Tensor::zeros({1, 2});
    EXPECT_THROW(combined_loss(x, x, x, {0.5}, {{1, Tensor::zeros({1, 1, 2})}}, LayerPair{1, 3, 0.1}),
                 std::invalid_argument);
}

TEST(SelectLayers, Anchors) {
    EXPECT_EQ(select_layers(28), (std::pair<int, int>{8, 16}));
    EXPECT_EQ(select_layers(12), (std::pair<int, int>{4, 7}));
    EXPECT_EQ(min_layer_gap(12), 3);
    EXPECT_EQ(min_layer_gap(28), 8);
    EXPECT_TRUE(is_valid_pair(24, 8, 18));
    EXPECT_EQ(max_reference_layer(24), 19);
    EXPECT_EQ(min_layer_gap(24), 7);
}

TEST(SelectLayers, ValidSetRule) {
    for (int depth = 4; depth <= 32; ++depth) {
        const auto valid = valid_layer_pairs(depth);
        for (const auto& [k, kr] : valid) {
            EXPECT_GE(k, 1);
            EXPECT_LE(kr, static_cast<int>(std::floor(0.8 * depth)));
            EXPECT_GE(kr - k, std::max(2, static_cast<int>(std::lround(0.28 * depth))));
        }
        const auto def = select_layers(depth);
        EXPECT_TRUE(is_valid_pair(depth, def.first, def.second)) << depth;
    }
    EXPECT_EQ(valid_layer_pairs(8).size(), 10u);
    EXPECT_EQ(select_layers(8), (std::pair<int, int>{2, 5}));
}

TEST(SelectLayers, RandomModeIsSeededAndValid) {
    std::set<std::pair<int, int>> seen;
    for (std::uint64_t s = 0; s < 200; ++s) {
        auto p = select_layers(12, PairSelection::random, s);
        EXPECT_EQ(p, select_layers(12, PairSelection::random, s));
        EXPECT_TRUE(is_valid_pair(12, p.first, p.second));
        seen.insert(p);
    }
    EXPECT_EQ(seen.size(), valid_layer_pairs(12).size());
}

TEST(SelectLayers, SampledPairsAreDistinctUntilExhausted) {
    const auto valid = valid_layer_pairs(8);
    ASSERT_EQ(valid.size(), 10u);
    auto pairs = sample_layer_pairs(8, 10, 1);
    EXPECT_EQ((std::set<std::pair<int, int>>(pairs.begin(), pairs.end()).size()), 10u);
    EXPECT_EQ(pairs, sample_layer_pairs(8, 10, 1));
    EXPECT_NE(pairs, sample_layer_pairs(8, 10, 2));
    auto more = sample_layer_pairs(8, 25, 1);
    EXPECT_EQ((std::vector<std::pair<int, int>>(more.begin(), more.begin() + 10)), pairs);
    for (const auto& [k, kr] : more) EXPECT_TRUE(is_valid_pair(8, k, kr));
    EXPECT_TRUE(sample_layer_pairs(8, 0, 1).empty());
}

TEST(SelectLayers, Errors) {
    EXPECT_THROW(select_layers(3), std::invalid_argument);
    EXPECT_THROW(validate(LayerPair{3, 2, 0.1}, 12), std::invalid_argument);
    EXPECT_THROW(validate(LayerPair{1, 11, 0.1}, 12), std::invalid_argument);
    EXPECT_THROW(validate(LayerPair{4, 7, -0.1}, 12), std::invalid_argument);
}

TEST(DispersiveLoss, IdenticalSamplesGiveZero) {
    auto one = randn_tensor({1, 3, 4}, 17);
    auto z = concat(std::vector<Tensor>{one, one, one}, 0);
    EXPECT_EQ(dispersive_loss(z, 0.5).item(), 0.0);
}

TEST(DispersiveLoss, TwoSamples) {
    // pooled vectors (0, 0) and (3, 4): d^2 = 25
    auto z = Tensor({2, 2, 2}, {-1, 0, 1, 0, 3, 4, 3, 4});
    EXPECT_NEAR(dispersive_loss(z, 0.5).item(), -50.0, 1e-12);
    EXPECT_NEAR(dispersive_loss(z, 2.0).item(), -12.5, 1e-12);
}

TEST(DispersiveLoss, NonPositiveAndDifferentiable) {
    CounterRng rng(18, 0, Purpose::eval);
    for (int i = 0; i < 20; ++i) EXPECT_LE(dispersive_loss(randn<double>({5, 3, 4}, rng), 0.5).item(), 0.0);
    auto z = randn_tensor({4, 2, 3}, 19);
    auto r = finite_difference_check([&] { return dispersive_loss(z, 0.5); }, z);
    EXPECT_LT(r.max_rel_error, 1e-6);
    EXPECT_THROW(dispersive_loss(Tensor::zeros({1, 2, 3}), 0.5), std::invalid_argument);
}

TEST(TrdLoss, SelfReferenceIsZero) {
    auto y = randn_tensor({3, 4, 5}, 20);
    auto maps = trd_similarity_maps(y);
    EXPECT_EQ(trd_loss(y, maps.spatial, maps.temporal).item(), 0.0);
}

TEST(TrdLoss, SingleFrameIsSpatialOnly) {
    auto y = randn_tensor({1, 3, 2}, 21);
    auto maps = trd_similarity_maps(y);
    EXPECT_FALSE(maps.temporal.defined());
    auto h = maps.spatial + Tensor::full({1, 3, 3}, 0.1);
    EXPECT_NEAR(trd_loss(y, h, Tensor()).item(), 0.1, 1e-14);
}

TEST(TrdLoss, HandComputedTwoFrames) {
    // f=2, hw=1, D=2: y0 = (1, 0), y1 = (0, 1)
    // spatial maps are self-cosines = 1; temporal cosines = 0.
    // h_spatial = [0.5, 1] -> mean |diff| = (0.5 + 0) / 2 = 0.25
    // h_temporal = [0.2, -0.4] -> mean |diff| = (0.2 + 0.4) / 2 = 0.3
    auto y = Tensor({2, 1, 2}, {1, 0, 0, 1});
    auto hs = Tensor({2, 1, 1}, {0.5, 1.0});
    auto ht = Tensor({2, 1, 1, 1}, {0.2, -0.4});
    EXPECT_NEAR(trd_loss(y, hs, ht).item(), 0.55, 1e-14);
}

TEST(TrdLoss, NonNegativeAndShapeChecked) {
    CounterRng rng(22, 0, Purpose::eval);
    for (int i = 0; i < 10; ++i) {
        auto y = randn<double>({2, 3, 4}, rng);
        auto hs = randn<double>({2, 3, 3}, rng), ht = randn<double>({2, 1, 3, 3}, rng);
        EXPECT_GT(trd_loss(y, hs, ht).item(), 0.0);
    }
    auto y = randn_tensor({2, 3, 4}, 23);
    EXPECT_THROW(trd_loss(y, Tensor::zeros({2, 3, 2}), Tensor::zeros({2, 1, 3, 3})), ShapeError);
    EXPECT_THROW(trd_loss(y, Tensor::zeros({2, 3, 3}), Tensor::zeros({2, 2, 3, 3})), ShapeError);
}

TEST(FlopsEstimate, Scaling) {
    const double c = kLossFlopsPerElement;
    EXPECT_EQ(loss_flops_estimate(128, 64, LossKind::layersync), 2 * loss_flops_estimate(64, 64, LossKind::layersync));
    EXPECT_EQ(loss_flops_estimate(128, 64, LossKind::dispersive),
              4 * loss_flops_estimate(64, 64, LossKind::dispersive));
    EXPECT_EQ(loss_flops_estimate(1, 64, LossKind::layersync), c * 64);
    EXPECT_EQ(loss_flops_estimate(1, 64, LossKind::dispersive), c * 64);
}

// Gradients of the sync term vanish on every block after k on a 4-block toy model.
TEST(StopGradientContract, BlocksAfterKGetNoSyncGradient) {
    BackboneConfig c;
    c.input_height = c.input_width = 8;
    c.patch_size = 2;
    c.depth = 4;
    c.hidden_dim = 16;
    c.num_heads = 2;
    c.frequency_dim = 16;
    Backbone<double> model(c);
    auto params = init_params<double>(c, 1);
    std::uint64_t i = 0;
    params.for_each([&](const std::string&, Tensor& t) {
        CounterRng rng(2, i++, Purpose::eval);
        for (auto& x : t.mutable_data()) x += 0.05 * rng.normal();
    });
    auto x = randn_tensor({2, 1, 8, 8}, 3);
    Tape tape;
    TapeScope<double> scope(tape);
    auto res = model.forward(params, x, {0.3, 0.7}, {0, 0}, {1, 3});
    tape.backward(layersync_loss(res.reps.at(1), res.reps.at(3)));
    params.for_each([&](const std::string& name, const Tensor& t) {
        double norm = 0;
        for (double g : t.grad()) norm += g * g;
        const bool after_k = name.rfind("blocks.2.", 0) == 0 || name.rfind("blocks.3.", 0) == 0 ||
                             name.rfind("blocks.4.", 0) == 0 || name.rfind("final.", 0) == 0;
        if (after_k) {
            EXPECT_EQ(norm, 0.0) << name;
        } else if (name.rfind("blocks.1.", 0) == 0 && name.find("weight") != std::string::npos) {
            EXPECT_GT(norm, 0.0) << name;
        }
    });
}

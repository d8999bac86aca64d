#include <gtest/gtest.h>

#include <filesystem>

#include "layersync/backbone.hpp"
#include "layersync/io.hpp"

using namespace layersync;

namespace {

BackboneConfig toy_config(int classes = 0) {
    BackboneConfig c;
    c.input_height = c.input_width = 8;
    c.input_channels = 1;
    c.patch_size = 2;
    c.depth = 4;
    c.hidden_dim = 32;
    c.num_heads = 4;
    c.num_classes = classes;
    c.frequency_dim = 32;
    return c;
}

Tensor randn_tensor(Shape shape, std::uint64_t seed) {
    CounterRng rng(seed, 0, Purpose::eval);
    return randn<double>(std::move(shape), rng);
}

// Fills the zero-initialized projections so every branch is active.
BackboneParams<double> perturbed(const BackboneConfig& c, std::uint64_t seed) {
    auto p = init_params<double>(c, seed);
    std::uint64_t i = 0;
    p.for_each([&](const std::string&, Tensor& t) {
        CounterRng rng(seed + 1, i++, Purpose::eval);
        auto v = t.mutable_data();
        for (auto& x : v) x += 0.05 * rng.normal();
    });
    return p;
}

std::vector<double> uniform_times(std::size_t n, std::uint64_t seed) {
    CounterRng rng(seed, 0, Purpose::time);
    std::vector<double> t(n);
    for (auto& v : t) v = rng.uniform();
    return t;
}

}  // namespace

TEST(Patchify, PaperShape) {
    auto x = Tensor::zeros({2, 4, 32, 32});
    EXPECT_EQ(patchify(x, 2).shape(), (Shape{2, 256, 16}));
}

TEST(Patchify, SinglePatchIsFlattenedImage) {
    auto x = randn_tensor({2, 3, 4, 4}, 1);
    auto p = patchify(x, 4);
    EXPECT_EQ(p.shape(), (Shape{2, 1, 48}));
    EXPECT_EQ(p.to_vector(), x.to_vector());
}

TEST(Patchify, LayoutRowMajorChannelMajor) {
    // 1 x 2 x 4 x 4 with value = c*100 + i*10 + j
    std::vector<double> v;
    for (int c = 0; c < 2; ++c)
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) v.push_back(c * 100 + i * 10 + j);
    auto p = patchify(Tensor({1, 2, 4, 4}, v), 2);
    // second patch is the top-right 2x2 block
    const std::vector<double> expect{2, 3, 12, 13, 102, 103, 112, 113};
    for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(p[8 + k], expect[k]);
}

TEST(Patchify, RoundTripAndErrors) {
    auto c = toy_config();
    c.input_channels = 3;
    auto x = randn_tensor({3, 3, 8, 8}, 2);
    EXPECT_EQ(unpatchify(patchify(x, 2), c).to_vector(), x.to_vector());
    auto z = unpatchify(Tensor::zeros({1, 16, 12}), c);
    for (double v : z.data()) EXPECT_EQ(v, 0.0);
    EXPECT_THROW(patchify(Tensor::zeros({1, 1, 7, 8}), 2), ShapeError);
    EXPECT_THROW(unpatchify(Tensor::zeros({1, 16, 5}), c), ShapeError);
    EXPECT_THROW(unpatchify(Tensor::zeros({1, 15, 12}), c), ShapeError);
}

TEST(Backbone, IdentityAtInit) {
    auto c = toy_config();
    Backbone<double> model(c);
    auto params = init_params<double>(c, 3);
    auto x = randn_tensor({4, 1, 8, 8}, 4);
    auto res = model.forward(params, x, uniform_times(4, 5), std::vector<int>(4, 0), {1, 2, 3, 4});
    NoGradScope<double> ng;
    auto embedded = linear(patchify(x, 2), params.patch_embed.weight, params.patch_embed.bias) +
                    sincos_position_embedding<double>(32, 4, 4);
    for (int k = 1; k <= 4; ++k) EXPECT_EQ(res.reps.at(k).to_vector(), embedded.to_vector()) << "block " << k;
    for (double v : res.v_pred.data()) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(res.v_pred.shape(), x.shape());
}

TEST(Backbone, GatesZeroAtInit) {
    auto params = init_params<double>(toy_config(), 3);
    for (const auto& b : params.blocks) {
        for (double v : b.adaln.weight.data()) ASSERT_EQ(v, 0.0);
        for (double v : b.adaln.bias.data()) ASSERT_EQ(v, 0.0);
    }
    for (double v : params.head.weight.data()) ASSERT_EQ(v, 0.0);
}

TEST(Backbone, InitDeterministic) {
    auto a = init_params<double>(toy_config(), 11), b = init_params<double>(toy_config(), 11);
    auto c = init_params<double>(toy_config(), 12);
    auto ta = a.tensors(), tb = b.tensors(), tc = c.tensors();
    bool any_diff = false;
    for (std::size_t i = 0; i < ta.size(); ++i) {
        EXPECT_EQ(ta[i].to_vector(), tb[i].to_vector());
        any_diff |= ta[i].to_vector() != tc[i].to_vector();
    }
    EXPECT_TRUE(any_diff);
    for (double v : a.blocks[0].qkv.weight.data()) EXPECT_LE(std::abs(v), 0.04 + 1e-12);
}

TEST(Backbone, OutputShapeMatchesInput) {
    for (int p : {1, 2, 4}) {
        auto c = toy_config();
        c.patch_size = p;
        c.input_channels = 3;
        Backbone<double> model(c);
        auto x = randn_tensor({2, 3, 8, 8}, 6);
        auto res = model.forward(perturbed(c, 7), x, {0.2, 0.9}, {0, 0});
        EXPECT_EQ(res.v_pred.shape(), x.shape());
    }
}

TEST(Backbone, BatchPermutationEquivariance) {
    auto c = toy_config(3);
    Backbone<double> model(c);
    auto params = perturbed(c, 8);
    auto x = randn_tensor({4, 1, 8, 8}, 9);
    std::vector<double> t{0.1, 0.4, 0.7, 0.95};
    std::vector<int> y{0, 1, 2, 3};
    const std::vector<std::size_t> perm{2, 0, 3, 1};
    std::vector<double> xp;
    std::vector<double> tp;
    std::vector<int> yp;
    const std::size_t per = 64;
    for (auto i : perm) {
        xp.insert(xp.end(), x.data().begin() + i * per, x.data().begin() + (i + 1) * per);
        tp.push_back(t[i]);
        yp.push_back(y[i]);
    }
    auto out = model.forward(params, x, t, y, {2}).v_pred;
    auto outp = model.forward(params, Tensor(x.shape(), xp), tp, yp, {2}).v_pred;
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t j = 0; j < per; ++j) EXPECT_NEAR(outp[r * per + j], out[perm[r] * per + j], 1e-12);
}

TEST(Backbone, TapConsistency) {
    auto c = toy_config();
    Backbone<double> model(c);
    auto params = perturbed(c, 10);
    auto x = randn_tensor({3, 1, 8, 8}, 11);
    std::vector<double> t{0.3, 0.5, 0.8};
    std::vector<int> y(3, 0);
    auto one = model.forward(params, x, t, y, {2});
    auto two = model.forward(params, x, t, y, {2, 4});
    auto none = model.forward(params, x, t, y);
    EXPECT_EQ(one.reps.at(2).to_vector(), two.reps.at(2).to_vector());
    EXPECT_EQ(one.v_pred.to_vector(), two.v_pred.to_vector());
    EXPECT_EQ(one.v_pred.to_vector(), none.v_pred.to_vector());
    EXPECT_EQ(two.reps.at(4).shape(), (Shape{3, 16, 32}));
    EXPECT_TRUE(none.reps.empty());
}

TEST(Backbone, ArgumentErrors) {
    auto c = toy_config(2);
    Backbone<double> model(c);
    auto params = init_params<double>(c, 1);
    auto x = Tensor::zeros({2, 1, 8, 8});
    EXPECT_THROW(model.forward(params, x, {0.5, 0.5}, {0, 0}, {5}), std::out_of_range);
    EXPECT_THROW(model.forward(params, x, {0.5, 0.5}, {0, 3}), std::out_of_range);
    EXPECT_NO_THROW(model.forward(params, x, {0.5, 0.5}, {0, 2}));  // null token
    EXPECT_THROW(model.forward(params, Tensor::zeros({2, 1, 8, 6}), {0.5, 0.5}, {0, 0}), ShapeError);
    EXPECT_THROW(model.forward(params, x, {0.5, 0.5}, {0, 0}, {}, {1, 2, 3, 4}), std::invalid_argument);
}

TEST(Backbone, ConfigValidation) {
    auto c = toy_config();
    c.num_heads = 5;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = toy_config();
    c.patch_size = 3;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = toy_config();
    c.depth = 1;
    EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Backbone, ParameterCountMatchesInit) {
    for (int classes : {0, 5}) {
        auto c = toy_config(classes);
        EXPECT_EQ(init_params<double>(c, 0).count(), parameter_count(c));
    }
}

TEST(Backbone, B2ParameterCountNear130M) {
    BackboneConfig c;
    c.input_height = c.input_width = 32;
    c.input_channels = 4;
    c.patch_size = 2;
    c.depth = 12;
    c.hidden_dim = 768;
    c.num_heads = 12;
    c.num_classes = 1000;
    c.frequency_dim = 256;
    const double n = static_cast<double>(parameter_count(c));
    EXPECT_NEAR(n / 130e6, 1.0, 0.05) << n;
}

TEST(Backbone, CheckpointRoundTripIsBitExact) {
    auto c = toy_config(2);
    auto params = perturbed(c, 13);
    const auto dir = std::filesystem::temp_directory_path() / "layersync_test_ckpt";
    std::filesystem::remove_all(dir);
    TensorArchive ar;
    ar.meta["note"] = "roundtrip";
    params.for_each([&](const std::string& n, const Tensor& t) { ar.add(n, t); });
    write_archive(dir, ar);
    const auto back = read_archive(dir);
    EXPECT_EQ(back.meta["note"], "roundtrip");
    params.for_each([&](const std::string& n, const Tensor& t) {
        auto r = back.get<double>(n);
        EXPECT_EQ(r.shape(), t.shape());
        EXPECT_EQ(r.to_vector(), t.to_vector()) << n;
    });
    std::filesystem::remove_all(dir);
}

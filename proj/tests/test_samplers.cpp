#include <gtest/gtest.h>

#include <cmath>

#include "layersync/experiments.hpp"
#include "layersync/samplers.hpp"

using namespace layersync;

namespace {

Tensor randn_tensor(Shape shape, std::uint64_t seed) {
    CounterRng rng(seed, 0, Purpose::eval);
    return randn<double>(std::move(shape), rng);
}

SamplerConfig full_range(int steps) {
    SamplerConfig c;
    c.steps = steps;
    c.t_min = 0.0;
    c.t_max = 1.0;
    return c;
}

// Exact velocity of the linear path when the data are N(0, I).
Tensor gaussian_velocity(const Tensor& x, double t) {
    Schedule s;
    const double a = s.alpha(t), sg = s.sigma(t);
    return mul_scalar(x, (a * s.alpha_dot(t) + sg * s.sigma_dot(t)) / (a * a + sg * sg));
}

double marginal_var(double t) { return t * t + (1 - t) * (1 - t); }

BackboneConfig toy_config(int classes) {
    BackboneConfig c;
    c.input_height = c.input_width = 4;
    c.patch_size = 2;
    c.depth = 2;
    c.hidden_dim = 16;
    c.num_heads = 2;
    c.num_classes = classes;
    c.frequency_dim = 16;
    return c;
}

BackboneParams<double> perturbed(const BackboneConfig& c, std::uint64_t seed) {
    auto p = init_params<double>(c, seed);
    std::uint64_t i = 0;
    p.for_each([&](const std::string&, Tensor& t) {
        CounterRng rng(seed + 1, i++, Purpose::eval);
        for (auto& x : t.mutable_data()) x += 0.1 * rng.normal();
    });
    return p;
}

}  // namespace

TEST(Heun, LinearDecayAt250Steps) {
    auto x0 = randn_tensor({5, 3}, 1);
    VelocityField<double> v = [](const Tensor& x, double) { return mul_scalar(x, -1.0); };
    auto x1 = integrate_ode_heun(v, full_range(250), x0);
    for (std::size_t i = 0; i < x0.numel(); ++i) EXPECT_NEAR(x1[i], x0[i] * std::exp(-1.0), 1e-4);
}

TEST(Heun, SecondOrderSlope) {
    auto x0 = Tensor({1, 1}, {1.0});
    // time-dependent field so the error constant is not special: dx/dt = -x (1 + t), x(1) = exp(-1.5)
    VelocityField<double> v = [](const Tensor& x, double t) { return mul_scalar(x, -(1.0 + t)); };
    std::vector<double> h, err;
    for (int n : {8, 16, 32, 64, 128}) {
        h.push_back(1.0 / n);
        err.push_back(std::abs(integrate_ode_heun(v, full_range(n), x0).item() - std::exp(-1.5)));
    }
    EXPECT_NEAR(loglog_slope(h, err), 2.0, 0.2);
}

TEST(Heun, ZeroFieldKeepsNoise) {
    auto x0 = randn_tensor({4, 2}, 2);
    VelocityField<double> v = [](const Tensor& x, double) { return Tensor::zeros(x.shape()); };
    EXPECT_EQ(integrate_ode_heun(v, SamplerConfig{}, x0).to_vector(), x0.to_vector());
}

TEST(Heun, InvalidConfig) {
    VelocityField<double> v = [](const Tensor& x, double) { return x; };
    SamplerConfig c;
    c.steps = 0;
    EXPECT_THROW(integrate_ode_heun(v, c, Tensor::zeros({1, 1})), std::invalid_argument);
    c = SamplerConfig{};
    c.t_min = 0.8;
    c.t_max = 0.2;
    EXPECT_THROW(integrate_ode_heun(v, c, Tensor::zeros({1, 1})), std::invalid_argument);
    c = SamplerConfig{};
    c.cfg_scale = 0.5;
    EXPECT_THROW(integrate_ode_heun(v, c, Tensor::zeros({1, 1})), std::invalid_argument);
}

TEST(EulerMaruyama, ZeroDiffusionIsEulerOde) {
    auto x0 = randn_tensor({6, 2}, 3);
    VelocityField<double> v = [](const Tensor& x, double t) { return tanh(x) * Tensor::scalar(1.0 - t) + x; };
    SamplerConfig c;
    c.steps = 40;
    c.diffusion = [](double) { return 0.0; };
    auto sde = integrate_sde_euler_maruyama(v, c, x0, 9);
    Tensor x = x0.clone();
    const double dt = (c.t_max - c.t_min) / c.steps;
    for (int i = 0; i < c.steps; ++i) {
        const double t0 = c.t_min + i * dt;
        const double t1 = i + 1 == c.steps ? c.t_max : c.t_min + (i + 1) * dt;
        x = x + v(x, t0) * Tensor::scalar(t1 - t0);
    }
    EXPECT_EQ(sde.to_vector(), x.to_vector());
}

TEST(EulerMaruyama, Deterministic) {
    auto x0 = randn_tensor({6, 2}, 4);
    SamplerConfig c;
    c.steps = 20;
    auto a = integrate_sde_euler_maruyama<double>(gaussian_velocity, c, x0, 5);
    auto b = integrate_sde_euler_maruyama<double>(gaussian_velocity, c, x0, 5);
    auto d = integrate_sde_euler_maruyama<double>(gaussian_velocity, c, x0, 6);
    EXPECT_EQ(a.to_vector(), b.to_vector());
    EXPECT_NE(a.to_vector(), d.to_vector());
}

TEST(EulerMaruyama, GaussianToyMarginals) {
    const std::size_t n = 10000;
    auto x0 = randn_tensor({n, 2}, 7);
    SamplerConfig c;
    c.steps = 100;
    auto x = integrate_sde_euler_maruyama<double>(gaussian_velocity, c, x0, 8);
    double m[2] = {0, 0}, cov[2][2] = {{0, 0}, {0, 0}};
    for (std::size_t i = 0; i < n; ++i)
        for (int a = 0; a < 2; ++a) m[a] += x[i * 2 + a] / n;
    for (std::size_t i = 0; i < n; ++i)
        for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b) cov[a][b] += (x[i * 2 + a] - m[a]) * (x[i * 2 + b] - m[b]) / (n - 1);
    for (int a = 0; a < 2; ++a) {
        EXPECT_LT(std::abs(m[a]), 0.05);
        EXPECT_LT(std::abs(cov[a][a] - 1.0), 0.1);
    }
}

TEST(EulerMaruyama, FirstOrderWeakSlope) {
    // Start on the exact marginal at t_min; the weak error is the variance gap at t_max.
    const std::size_t n = 200000;
    SamplerConfig c;
    std::vector<double> h, err;
    for (int steps : {8, 16, 32, 64}) {
        c.steps = steps;
        auto x0 = mul_scalar(randn_tensor({n, 1}, 100 + steps), std::sqrt(marginal_var(c.t_min)));
        auto x = integrate_sde_euler_maruyama<double>(gaussian_velocity, c, x0, 200 + steps);
        double v = 0;
        for (double e : x.data()) v += e * e / n;
        h.push_back((c.t_max - c.t_min) / steps);
        err.push_back(std::abs(v - marginal_var(c.t_max)));
    }
    EXPECT_NEAR(loglog_slope(h, err), 1.0, 0.3);
}

TEST(NetworkSampling, SeedDeterminesOutput) {
    auto c = toy_config(0);
    Backbone<double> model(c);
    auto params = perturbed(c, 1);
    SamplerConfig sc;
    sc.steps = 8;
    std::vector<int> labels(3, 0);
    for (auto kind : {SamplerKind::ode_heun, SamplerKind::sde_euler_maruyama}) {
        sc.kind = kind;
        auto a = sample(model, params, sc, labels, 11);
        auto b = sample(model, params, sc, labels, 11);
        auto d = sample(model, params, sc, labels, 12);
        EXPECT_EQ(a.to_vector(), b.to_vector());
        EXPECT_NE(a.to_vector(), d.to_vector());
        EXPECT_EQ(a.shape(), (Shape{3, 1, 4, 4}));
    }
}

TEST(NetworkSampling, GuidanceScaleOneIsConditionalBranch) {
    auto c = toy_config(3);
    Backbone<double> model(c);
    auto params = perturbed(c, 2);
    SamplerConfig sc;
    sc.steps = 6;
    std::vector<int> labels{0, 1, 2};
    auto guided = sample(model, params, sc, labels, 3);
    VelocityField<double> cond = [&](const Tensor& x, double t) {
        return model.forward(params, x, std::vector<double>(x.size(0), t), labels).v_pred;
    };
    auto plain = integrate_ode_heun(cond, sc, initial_noise<double>(c, 3, 3));
    EXPECT_EQ(guided.to_vector(), plain.to_vector());

    sc.cfg_scale = 4.0;
    EXPECT_NE(sample(model, params, sc, labels, 3).to_vector(), guided.to_vector());
}

TEST(NetworkSampling, DoesNotMutateParams) {
    auto c = toy_config(0);
    Backbone<double> model(c);
    auto params = perturbed(c, 4);
    auto before = params.clone().tensors();
    SamplerConfig sc;
    sc.steps = 4;
    sc.kind = SamplerKind::sde_euler_maruyama;
    sample(model, params, sc, {0, 0}, 5);
    auto after = params.tensors();
    for (std::size_t i = 0; i < after.size(); ++i) {
        EXPECT_EQ(after[i].to_vector(), before[i].to_vector());
        EXPECT_FALSE(after[i].has_grad());
    }
}

TEST(NetworkSampling, EmptySkipIsNoOp) {
    auto c = toy_config(0);
    Backbone<double> model(c);
    auto params = perturbed(c, 6);
    SamplerConfig sc;
    sc.steps = 4;
    auto a = sample(model, params, sc, {0, 0}, 7);
    auto b = sample(model, params, sc, {0, 0}, 7, {});
    auto d = sample(model, params, sc, {0, 0}, 7, {1});
    EXPECT_EQ(a.to_vector(), b.to_vector());
    EXPECT_NE(a.to_vector(), d.to_vector());
}

#pragma once

// Generation-time integrators over increasing t (noise at t_min, data at t_max).

#include <cmath>
#include <functional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "layersync/backbone.hpp"
#include "layersync/interpolant.hpp"
#include "layersync/rng.hpp"

namespace layersync {

enum class SamplerKind { ode_heun, sde_euler_maruyama };

struct SamplerConfig {
    SamplerKind kind = SamplerKind::ode_heun;
    int steps = 250;
    double t_min = 1e-3;
    double t_max = 1.0 - 1e-3;
    double cfg_scale = 1.0;
    // SDE diffusion coefficient w(t); defaults to sigma(t) when empty.
    std::function<double(double)> diffusion;

    void validate() const {
        if (steps < 1) throw std::invalid_argument("SamplerConfig: steps must be >= 1");
        if (!(t_min >= 0.0 && t_min < t_max && t_max <= 1.0))
            throw std::invalid_argument("SamplerConfig: need 0 <= t_min < t_max <= 1");
        if (!(cfg_scale >= 1.0)) throw std::invalid_argument("SamplerConfig: cfg_scale must be >= 1");
    }
    double w(double t, const Schedule& s) const { return diffusion ? diffusion(t) : s.sigma(t); }
};

// v(x, t) for a whole batch at a shared time.
template <typename T>
using VelocityField = std::function<BasicTensor<T>(const BasicTensor<T>& x, double t)>;

template <typename T>
BasicTensor<T> integrate_ode_heun(const VelocityField<T>& v, const SamplerConfig& cfg, BasicTensor<T> x) {
    cfg.validate();
    NoGradScope<T> no_grad;
    const double dt = (cfg.t_max - cfg.t_min) / cfg.steps;
    for (int i = 0; i < cfg.steps; ++i) {
        const double t0 = cfg.t_min + i * dt;
        const double t1 = i + 1 == cfg.steps ? cfg.t_max : cfg.t_min + (i + 1) * dt;
        const T h = static_cast<T>(t1 - t0);
        auto k1 = v(x, t0);
        auto x_pred = x + k1 * h;
        auto k2 = v(x_pred, t1);
        x = x + (k1 + k2) * static_cast<T>(0.5 * (t1 - t0));
    }
    return x;
}

// Euler-Maruyama for dx = (v + w s / 2) dt + sqrt(w) dW over increasing t, with
// s the score recovered from v. The final step is taken without noise.
template <typename T>
BasicTensor<T> integrate_sde_euler_maruyama(const VelocityField<T>& v, const SamplerConfig& cfg, BasicTensor<T> x,
                                            std::uint64_t seed, const Schedule& sched = {}) {
    cfg.validate();
    NoGradScope<T> no_grad;
    const double dt = (cfg.t_max - cfg.t_min) / cfg.steps;
    const std::size_t batch = x.size(0);
    for (int i = 0; i < cfg.steps; ++i) {
        const double t0 = cfg.t_min + i * dt;
        const double t1 = i + 1 == cfg.steps ? cfg.t_max : cfg.t_min + (i + 1) * dt;
        const double h = t1 - t0;
        const double w = cfg.w(t0, sched);
        auto vel = v(x, t0);
        auto score = velocity_to_score(vel, x, std::vector<double>(batch, t0), sched);
        auto drift = vel + score * static_cast<T>(0.5 * w);
        x = x + drift * static_cast<T>(h);
        if (i + 1 < cfg.steps) {
            CounterRng rng(seed, static_cast<std::uint64_t>(i), Purpose::sde_noise);
            x = x + randn<T>(x.shape(), rng) * static_cast<T>(std::sqrt(w * std::abs(h)));
        }
    }
    return x;
}

// Network velocity with optional classifier-free guidance.
// With cfg_scale == 1 only the conditional branch is evaluated.
template <typename T>
VelocityField<T> network_field(const Backbone<T>& model, const BackboneParams<T>& params, std::vector<int> labels,
                               double cfg_scale = 1.0, std::set<int> skip = {}) {
    return [&model, &params, labels = std::move(labels), cfg_scale, skip = std::move(skip)](
               const BasicTensor<T>& x, double t) {
        const std::vector<double> times(x.size(0), t);
        auto cond = model.forward(params, x, times, labels, {}, skip).v_pred;
        if (cfg_scale == 1.0) return cond;
        std::vector<int> null_labels(labels.size(), model.config().null_label());
        auto uncond = model.forward(params, x, times, null_labels, {}, skip).v_pred;
        return uncond + (cond - uncond) * static_cast<T>(cfg_scale);
    };
}

// Standard-normal starting noise for a sample batch; fixed by `seed`.
template <typename T>
BasicTensor<T> initial_noise(const BackboneConfig& c, std::size_t batch, std::uint64_t seed) {
    CounterRng rng(seed, 0, Purpose::sampler_noise);
    return randn<T>({batch, static_cast<std::size_t>(c.input_channels), static_cast<std::size_t>(c.input_height),
                     static_cast<std::size_t>(c.input_width)},
                    rng);
}

template <typename T>
BasicTensor<T> sample_ode_heun(const Backbone<T>& model, const BackboneParams<T>& params, const SamplerConfig& cfg,
                               const std::vector<int>& labels, std::uint64_t seed, const std::set<int>& skip = {}) {
    auto field = network_field(model, params, labels, cfg.cfg_scale, skip);
    return integrate_ode_heun<T>(field, cfg, initial_noise<T>(model.config(), labels.size(), seed));
}

template <typename T>
BasicTensor<T> sample_sde_euler_maruyama(const Backbone<T>& model, const BackboneParams<T>& params,
                                         const SamplerConfig& cfg, const std::vector<int>& labels, std::uint64_t seed,
                                         const std::set<int>& skip = {}) {
    auto field = network_field(model, params, labels, cfg.cfg_scale, skip);
    return integrate_sde_euler_maruyama<T>(field, cfg, initial_noise<T>(model.config(), labels.size(), seed), seed);
}

template <typename T>
BasicTensor<T> sample(const Backbone<T>& model, const BackboneParams<T>& params, const SamplerConfig& cfg,
                      const std::vector<int>& labels, std::uint64_t seed, const std::set<int>& skip = {}) {
    return cfg.kind == SamplerKind::ode_heun ? sample_ode_heun(model, params, cfg, labels, seed, skip)
                                             : sample_sde_euler_maruyama(model, params, cfg, labels, seed, skip);
}

}  // namespace layersync

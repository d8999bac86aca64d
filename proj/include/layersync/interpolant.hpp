#pragma once

// Stochastic-interpolant path x_t = alpha(t) x0 + sigma(t) eps.
//
// Time convention: t = 1 is data (alpha = 1, sigma = 0) and t = 0 is noise.
// Generation integrates over increasing t.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "layersync/ops.hpp"

namespace layersync {

enum class ScheduleKind { linear };

struct Schedule {
    ScheduleKind kind = ScheduleKind::linear;

    double alpha(double t) const { return t; }
    double sigma(double t) const { return 1.0 - t; }
    double alpha_dot(double) const { return 1.0; }
    double sigma_dot(double) const { return -1.0; }
};

namespace detail {

inline void check_times(std::string_view op, const std::vector<double>& t, std::size_t batch) {
    if (t.size() != batch && t.size() != 1)
        throw ShapeError(std::string(op) + ": " + std::to_string(t.size()) + " times for batch of " +
                         std::to_string(batch));
    for (double v : t)
        if (!(v >= 0.0 && v <= 1.0)) throw std::domain_error(std::string(op) + ": t = " + std::to_string(v) + " outside [0, 1]");
}

// Per-sample coefficient as a (B, 1, ..., 1) tensor matching `like`'s rank.
template <typename T, typename F>
BasicTensor<T> per_sample(const BasicTensor<T>& like, const std::vector<double>& t, F coef) {
    const std::size_t batch = like.dim() ? like.size(0) : 1;
    Shape shape(like.dim(), 1);
    if (!shape.empty()) shape[0] = batch;
    std::vector<T> v(batch);
    for (std::size_t b = 0; b < batch; ++b) v[b] = static_cast<T>(coef(t.size() == 1 ? t[0] : t[b]));
    return BasicTensor<T>(std::move(shape), std::move(v));
}

}  // namespace detail

template <typename T>
BasicTensor<T> corrupt(const BasicTensor<T>& x0, const BasicTensor<T>& eps, const std::vector<double>& t,
                       const Schedule& s = {}) {
    if (x0.shape() != eps.shape()) throw shape_error("corrupt", x0.shape(), eps.shape());
    detail::check_times("corrupt", t, x0.size(0));
    return detail::per_sample(x0, t, [&](double v) { return s.alpha(v); }) * x0 +
           detail::per_sample(x0, t, [&](double v) { return s.sigma(v); }) * eps;
}

template <typename T>
BasicTensor<T> velocity_target(const BasicTensor<T>& x0, const BasicTensor<T>& eps, const std::vector<double>& t,
                               const Schedule& s = {}) {
    if (x0.shape() != eps.shape()) throw shape_error("velocity_target", x0.shape(), eps.shape());
    detail::check_times("velocity_target", t, x0.size(0));
    return detail::per_sample(x0, t, [&](double v) { return s.alpha_dot(v); }) * x0 +
           detail::per_sample(x0, t, [&](double v) { return s.sigma_dot(v); }) * eps;
}

// Mean over batch and coordinates of (v_pred - target)^2.
template <typename T>
BasicTensor<T> velocity_loss(const BasicTensor<T>& v_pred, const BasicTensor<T>& x0, const BasicTensor<T>& eps,
                             const std::vector<double>& t, const Schedule& s = {}) {
    if (v_pred.shape() != x0.shape()) throw shape_error("velocity_loss", v_pred.shape(), x0.shape());
    return mean_all(square(v_pred - velocity_target(x0, eps, t, s)));
}

// Score from velocity: v = (a'/a) x - sigma (sigma' - a' sigma / a) s.
// Singular where alpha = 0 or sigma = 0 (both endpoints for the linear path).
template <typename T>
BasicTensor<T> velocity_to_score(const BasicTensor<T>& v, const BasicTensor<T>& x, const std::vector<double>& t,
                                 const Schedule& s = {}) {
    if (v.shape() != x.shape()) throw shape_error("velocity_to_score", v.shape(), x.shape());
    detail::check_times("velocity_to_score", t, x.size(0));
    for (double tv : t) {
        const double a = s.alpha(tv), sg = s.sigma(tv);
        const double denom = a == 0.0 ? 0.0 : sg * (s.sigma_dot(tv) - s.alpha_dot(tv) * sg / a);
        if (a == 0.0 || denom == 0.0 || !std::isfinite(denom))
            throw std::domain_error("velocity_to_score: singular conversion at t = " + std::to_string(tv) +
                                    (a == 0.0 ? " (alpha = 0)" : " (sigma = 0)"));
    }
    auto drift = detail::per_sample(x, t, [&](double tv) { return s.alpha_dot(tv) / s.alpha(tv); });
    auto inv_denom = detail::per_sample(x, t, [&](double tv) {
        const double a = s.alpha(tv), sg = s.sigma(tv);
        return 1.0 / (sg * (s.sigma_dot(tv) - s.alpha_dot(tv) * sg / a));
    });
    return (drift * x - v) * inv_denom;
}

}  // namespace layersync

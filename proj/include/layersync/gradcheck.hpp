#pragma once

// Central-difference verification of tape gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "layersync/ops.hpp"
#include "layersync/rng.hpp"

namespace layersync {

struct GradCheckOptions {
    double step = 1e-5;
    // Parameters with more coordinates than this are probed on a seeded random subset.
    std::size_t max_coords = 64;
    double denom_eps = 1e-8;
    std::uint64_t seed = 0;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t coords_checked = 0;
};

// Analytic gradients come from `loss_fn` on the tape, central differences from
// `numeric_fn`. The two differ when the loss contains stop_gradient: the
// numeric side must then hold the stopped values fixed.
// Returns max |analytic - central| / (|analytic| + |central| + denom_eps) over probed coordinates.
inline GradCheckResult finite_difference_check(const std::function<Tensor()>& loss_fn,
                                               const std::function<Tensor()>& numeric_fn, std::vector<Tensor> params,
                                               const GradCheckOptions& opt = {}) {
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        TapeScope<double> scope(tape);
        for (auto& p : params) {
            p.set_requires_grad(true);
            p.zero_grad();
        }
        Tensor loss = loss_fn();
        if (!std::isfinite(loss.item())) throw std::domain_error("finite_difference_check: loss is not finite");
        tape.backward(loss);
        for (auto& p : params) analytic.push_back(p.grad());
    }

    auto eval = [&]() {
        NoGradScope<double> no_grad;
        const double v = numeric_fn().item();
        if (!std::isfinite(v)) throw std::domain_error("finite_difference_check: perturbed loss is not finite");
        return v;
    };

    GradCheckResult result;
    CounterRng rng(opt.seed, 0, Purpose::eval);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        std::vector<std::size_t> coords(p.numel());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (coords.size() > opt.max_coords) {
            for (std::size_t i = 0; i < opt.max_coords; ++i)
                std::swap(coords[i], coords[i + rng.uniform_index(coords.size() - i)]);
            coords.resize(opt.max_coords);
        }
        auto values = p.mutable_data();
        for (std::size_t c : coords) {
            const double orig = values[c];
            values[c] = orig + opt.step;
            const double up = eval();
            values[c] = orig - opt.step;
            const double down = eval();
            values[c] = orig;
            const double numeric = (up - down) / (2.0 * opt.step);
            const double a = analytic[pi][c];
            const double err = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + opt.denom_eps);
            result.max_rel_error = std::max(result.max_rel_error, err);
            ++result.coords_checked;
        }
    }
    return result;
}

// `loss_fn` must build the loss from `params` using tape ops and be deterministic.
inline GradCheckResult finite_difference_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                                               const GradCheckOptions& opt = {}) {
    return finite_difference_check(loss_fn, loss_fn, std::move(params), opt);
}

inline GradCheckResult finite_difference_check(const std::function<Tensor()>& loss_fn, Tensor param,
                                               const GradCheckOptions& opt = {}) {
    return finite_difference_check(loss_fn, std::vector<Tensor>{std::move(param)}, opt);
}

}  // namespace layersync

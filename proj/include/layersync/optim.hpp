#pragma once

// AdamW and parameter EMA over lists of leaf tensors.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "layersync/tensor.hpp"

namespace layersync {

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

template <typename T>
struct AdamWState {
    std::vector<BasicTensor<T>> m, v;
    long step = 0;

    static AdamWState zeros_like(const std::vector<BasicTensor<T>>& params) {
        AdamWState s;
        for (const auto& p : params) {
            s.m.push_back(BasicTensor<T>::zeros(p.shape()));
            s.v.push_back(BasicTensor<T>::zeros(p.shape()));
        }
        return s;
    }
};

// One decoupled-weight-decay Adam update, in place:
//   theta <- theta (1 - lr wd)
//   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
//   theta <- theta - lr m_hat / (sqrt(v_hat) + eps)
// Parameters without a gradient buffer are treated as having zero gradient.
template <typename T>
void adamw_step(std::vector<BasicTensor<T>>& params, AdamWState<T>& state, const AdamWConfig& hp,
                const std::vector<std::string>& names = {}) {
    if (state.m.size() != params.size()) throw std::invalid_argument("adamw_step: state does not match parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
        for (T g : params[i].grad_span())
            if (!std::isfinite(static_cast<double>(g)))
                throw std::domain_error("adamw_step: non-finite gradient in " +
                                        (i < names.size() ? names[i] : "parameter #" + std::to_string(i)));
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto theta = params[i].mutable_data();
        auto grad = params[i].grad_span();
        auto m = state.m[i].mutable_data();
        auto v = state.v[i].mutable_data();
        for (std::size_t j = 0; j < theta.size(); ++j) {
            const double g = grad.empty() ? 0.0 : static_cast<double>(grad[j]);
            double th = static_cast<double>(theta[j]) * (1.0 - hp.lr * hp.weight_decay);
            const double mj = hp.beta1 * static_cast<double>(m[j]) + (1.0 - hp.beta1) * g;
            const double vj = hp.beta2 * static_cast<double>(v[j]) + (1.0 - hp.beta2) * g * g;
            m[j] = static_cast<T>(mj);
            v[j] = static_cast<T>(vj);
            th -= hp.lr * (mj / bc1) / (std::sqrt(vj / bc2) + hp.eps);
            theta[j] = static_cast<T>(th);
        }
    }
}

// ema <- decay ema + (1 - decay) params, per tensor.
template <typename T>
void ema_update(std::vector<BasicTensor<T>>& ema, const std::vector<BasicTensor<T>>& params, double decay) {
    if (ema.size() != params.size()) throw std::invalid_argument("ema_update: parameter lists differ in length");
    for (std::size_t i = 0; i < ema.size(); ++i) {
        if (ema[i].shape() != params[i].shape())
            throw shape_error("ema_update", ema[i].shape(), params[i].shape(), "tensor #" + std::to_string(i));
        auto e = ema[i].mutable_data();
        auto p = params[i].data();
        for (std::size_t j = 0; j < e.size(); ++j)
            e[j] = static_cast<T>(decay * static_cast<double>(e[j]) + (1.0 - decay) * static_cast<double>(p[j]));
    }
}

}  // namespace layersync

#pragma once

// Representation analysis: linear CKA, linear probes, PCA projections, and
// feature extraction from backbone taps.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "layersync/backbone.hpp"
#include "layersync/interpolant.hpp"
#include "layersync/metrics.hpp"
#include "layersync/optim.hpp"
#include "layersync/rng.hpp"

namespace layersync {

inline Eigen::MatrixXd center_columns(const Eigen::MatrixXd& x) { return x.rowwise() - x.colwise().mean(); }

// ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F) on column-centered inputs.
inline double linear_cka(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
    if (x.rows() != y.rows()) throw std::invalid_argument("linear_cka: row counts differ");
    if (x.rows() < 2) throw std::invalid_argument("linear_cka: need at least 2 rows");
    const Eigen::MatrixXd xc = center_columns(x), yc = center_columns(y);
    const double nx = (xc.transpose() * xc).norm();
    const double ny = (yc.transpose() * yc).norm();
    if (nx == 0.0) throw std::domain_error("linear_cka: first argument has zero variance");
    if (ny == 0.0) throw std::domain_error("linear_cka: second argument has zero variance");
    return (yc.transpose() * xc).squaredNorm() / (nx * ny);
}

struct ProbeOptions {
    int epochs = 50;
    int batch_size = 64;
    double lr = 1e-2;
    double val_fraction = 0.2;
    std::uint64_t seed = 0;
};

struct ProbeResult {
    double train_accuracy = 0.0;
    double val_accuracy = 0.0;
};

// Softmax-regression probe on frozen features with a seeded 80/20 split.
inline ProbeResult linear_probe(const Eigen::MatrixXd& features, const std::vector<int>& labels,
                                const ProbeOptions& opt = {}) {
    const std::size_t n = static_cast<std::size_t>(features.rows());
    if (labels.size() != n) throw std::invalid_argument("linear_probe: label count differs from rows");
    std::set<int> classes(labels.begin(), labels.end());
    if (classes.size() < 2) throw std::invalid_argument("linear_probe: labels contain a single class");
    if (*classes.begin() < 0) throw std::invalid_argument("linear_probe: negative label");
    const std::size_t k = static_cast<std::size_t>(*classes.rbegin() + 1);
    const std::size_t d_in = static_cast<std::size_t>(features.cols());

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    {
        CounterRng rng(opt.seed, 0, Purpose::split);
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
    }
    const std::size_t n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(opt.val_fraction * n)));
    const std::size_t n_train = n - n_val;
    if (n_train == 0) throw std::invalid_argument("linear_probe: too few samples for a split");

    // PCA-whiten with training statistics, dropping null directions. The probe's
    // model class is invariant to invertible maps of the features; whitening makes
    // the optimizer path invariant too (up to per-coordinate sign).
    Eigen::MatrixXd train_x(static_cast<Eigen::Index>(n_train), static_cast<Eigen::Index>(d_in));
    for (std::size_t i = 0; i < n_train; ++i) train_x.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(order[i]));
    const Eigen::RowVectorXd mu = train_x.colwise().mean();
    const Eigen::MatrixXd xc = train_x.rowwise() - mu;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(xc.transpose() * xc / static_cast<double>(n_train));
    const Eigen::VectorXd ev = es.eigenvalues();
    const double top = std::max(ev.maxCoeff(), 0.0);
    std::vector<Eigen::Index> keep;
    for (Eigen::Index j = ev.size() - 1; j >= 0; --j)
        if (ev(j) > 1e-10 * top && ev(j) > 1e-300) keep.push_back(j);
    if (keep.empty()) throw std::domain_error("linear_probe: features have zero variance");
    const std::size_t d = keep.size();
    Eigen::MatrixXd proj(static_cast<Eigen::Index>(d_in), static_cast<Eigen::Index>(d));
    for (std::size_t c = 0; c < d; ++c)
        proj.col(static_cast<Eigen::Index>(c)) = es.eigenvectors().col(keep[c]) / std::sqrt(ev(keep[c]));
    auto row = [&](std::size_t i) {
        Eigen::RowVectorXd r = (features.row(static_cast<Eigen::Index>(i)) - mu) * proj;
        return r;
    };

    Tensor w = Tensor::zeros({d, k}), b = Tensor::zeros({k});
    w.set_requires_grad(true);
    b.set_requires_grad(true);
    std::vector<Tensor> params{w, b};
    auto state = AdamWState<double>::zeros_like(params);
    AdamWConfig hp;
    hp.lr = opt.lr;

    auto batch_tensor = [&](const std::vector<std::size_t>& idx) {
        std::vector<double> v;
        v.reserve(idx.size() * d);
        for (std::size_t i : idx) {
            auto r = row(i);
            v.insert(v.end(), r.data(), r.data() + d);
        }
        return Tensor({idx.size(), d}, std::move(v));
    };

    std::vector<std::size_t> train(order.begin(), order.begin() + static_cast<long>(n_train));
    const std::size_t bs = static_cast<std::size_t>(std::max(1, opt.batch_size));
    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        CounterRng rng(opt.seed, static_cast<std::uint64_t>(epoch), Purpose::probe);
        for (std::size_t i = train.size(); i > 1; --i) std::swap(train[i - 1], train[rng.uniform_index(i)]);
        for (std::size_t start = 0; start < train.size(); start += bs) {
            std::vector<std::size_t> idx(train.begin() + static_cast<long>(start),
                                         train.begin() + static_cast<long>(std::min(train.size(), start + bs)));
            std::vector<double> onehot(idx.size() * k, 0.0);
            for (std::size_t r = 0; r < idx.size(); ++r) onehot[r * k + static_cast<std::size_t>(labels[idx[r]])] = 1.0;
            Tape tape;
            TapeScope<double> scope(tape);
            for (auto& p : params) p.zero_grad();
            auto logp = log_softmax(linear(batch_tensor(idx), w, b));
            auto loss = -sum_all(logp * Tensor({idx.size(), k}, std::move(onehot))) * (1.0 / idx.size());
            tape.backward(loss);
            adamw_step(params, state, hp);
        }
    }

    auto accuracy = [&](std::size_t begin, std::size_t end) {
        std::vector<std::size_t> idx(order.begin() + static_cast<long>(begin), order.begin() + static_cast<long>(end));
        NoGradScope<double> no_grad;
        auto logits = linear(batch_tensor(idx), w, b);
        std::size_t correct = 0;
        for (std::size_t r = 0; r < idx.size(); ++r) {
            const auto v = logits.data().subspan(r * k, k);
            const auto best = static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
            correct += best == labels[idx[r]];
        }
        return static_cast<double>(correct) / static_cast<double>(idx.size());
    };
    return {accuracy(0, n_train), accuracy(n_train, n)};
}

// Top principal components (covariance eigendecomposition), projected rows.
inline Eigen::MatrixXd pca_project(const Eigen::MatrixXd& x, int components) {
    const Eigen::MatrixXd xc = center_columns(x);
    const Eigen::MatrixXd cov = xc.transpose() * xc / std::max<double>(1.0, static_cast<double>(x.rows() - 1));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    const Eigen::Index c = std::min<Eigen::Index>(components, x.cols());
    // Eigenvalues are ascending; take the last c columns, largest first.
    Eigen::MatrixXd basis(x.cols(), c);
    for (Eigen::Index i = 0; i < c; ++i) basis.col(i) = es.eigenvectors().col(x.cols() - 1 - i);
    return xc * basis;
}

// Block representations at a fixed noise level: one (N, P, D) tensor per tapped layer.
template <typename T>
std::map<int, BasicTensor<T>> extract_representations(const Backbone<T>& model, const BackboneParams<T>& params,
                                                      const BasicTensor<T>& x0, const std::vector<int>& labels,
                                                      const TapSet& layers, double t, std::uint64_t seed,
                                                      bool use_labels = false) {
    NoGradScope<T> no_grad;
    CounterRng rng(seed, 0, Purpose::noise);
    auto eps = randn<T>(x0.shape(), rng);
    const std::vector<double> times(x0.size(0), t);
    auto xt = corrupt(x0, eps, times);
    std::vector<int> y = use_labels ? labels : std::vector<int>(x0.size(0), model.config().null_label());
    return model.forward(params, xt, times, y, layers).reps;
}

// (N, P, D) -> (N, D) by averaging over patches.
template <typename T>
Eigen::MatrixXd pool_patches(const BasicTensor<T>& reps) {
    NoGradScope<T> no_grad;
    return as_matrix(mean(reps, 1));
}

}  // namespace layersync

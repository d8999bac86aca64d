#pragma once

// Distribution metrics on sample sets: Frechet distance between Gaussian fits
// of feature embeddings, and the unbiased RBF-kernel MMD^2.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "layersync/data.hpp"
#include "layersync/rng.hpp"
#include "layersync/tensor.hpp"

namespace layersync {

// Rows = samples, flattening all trailing axes.
template <typename T>
Eigen::MatrixXd as_matrix(const BasicTensor<T>& x) {
    if (x.dim() == 0) throw ShapeError("as_matrix: scalar input");
    const auto n = static_cast<Eigen::Index>(x.size(0));
    const auto d = static_cast<Eigen::Index>(n ? x.numel() / x.size(0) : 0);
    Eigen::MatrixXd m(n, d);
    const auto v = x.data();
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < d; ++j) m(i, j) = static_cast<double>(v[static_cast<std::size_t>(i * d + j)]);
    return m;
}

// Symmetric PSD square root by eigendecomposition. Eigenvalues below -tol are an error; others clamp to 0.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, double tol = 1e-8) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    if (es.info() != Eigen::Success) throw std::runtime_error("psd_sqrt: eigendecomposition failed");
    Eigen::VectorXd ev = es.eigenvalues();
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
        if (ev(i) < -tol) throw std::domain_error("psd_sqrt: eigenvalue " + std::to_string(ev(i)) + " is negative");
        ev(i) = std::sqrt(std::max(ev(i), 0.0));
    }
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

struct GaussianFit {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
};

inline GaussianFit fit_gaussian(const Eigen::MatrixXd& x) {
    GaussianFit g;
    g.mean = x.colwise().mean().transpose();
    const Eigen::MatrixXd c = x.rowwise() - g.mean.transpose();
    g.cov = (c.transpose() * c) / static_cast<double>(x.rows() - 1);
    if (!g.cov.allFinite()) throw std::domain_error("frechet_distance: non-finite covariance");
    return g;
}

// ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the trace of the
// product root taken from the symmetrized form S_a^{1/2} S_b S_a^{1/2}.
inline double frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    if (a.cols() != b.cols()) throw std::invalid_argument("frechet_distance: feature dimensions differ");
    const Eigen::Index need = 2 * a.cols();
    if (a.rows() < need || b.rows() < need)
        throw std::invalid_argument("frechet_distance: need >= " + std::to_string(need) + " samples per side, got " +
                                    std::to_string(a.rows()) + " and " + std::to_string(b.rows()));
    const auto fa = fit_gaussian(a), fb = fit_gaussian(b);
    const Eigen::MatrixXd ra = psd_sqrt(fa.cov);
    const Eigen::MatrixXd mid = ra * fb.cov * ra;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (mid + mid.transpose()), Eigen::EigenvaluesOnly);
    double tr_sqrt = 0.0;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
        const double ev = es.eigenvalues()(i);
        if (ev < -1e-8) throw std::domain_error("frechet_distance: product has negative eigenvalue " + std::to_string(ev));
        tr_sqrt += std::sqrt(std::max(ev, 0.0));
    }
    const double d = (fa.mean - fb.mean).squaredNorm() + fa.cov.trace() + fb.cov.trace() - 2.0 * tr_sqrt;
    return std::max(d, 0.0);
}

using FeatureFn = std::function<Eigen::MatrixXd(const Eigen::MatrixXd&)>;

inline Eigen::MatrixXd identity_features(const Eigen::MatrixXd& x) { return x; }

// Fixed random convolutional embedder for tiny images. Weights are pinned by a
// constant seed so distances are comparable across runs and machines.
class ConvFeatureEmbedder {
public:
    static constexpr std::uint64_t kSeed = 0x5eed'f1d0ull;

    ConvFeatureEmbedder(int channels, int size, int filters = 8)
        : channels_(channels), size_(size), filters_(filters) {
        CounterRng rng(kSeed, static_cast<std::uint64_t>(channels * 100 + size), Purpose::feature_fn);
        const double scale = 1.0 / std::sqrt(9.0 * channels);
        weights_.resize(static_cast<std::size_t>(filters * channels * 9));
        for (auto& w : weights_) w = scale * rng.normal();
        bias_.resize(static_cast<std::size_t>(filters));
        for (auto& b : bias_) b = 0.1 * rng.normal();
    }

    // Per filter: ReLU response averaged over the whole image and over each quadrant.
    int feature_dim() const { return filters_ * 5; }

    Eigen::MatrixXd operator()(const Eigen::MatrixXd& x) const {
        const int s = size_, c = channels_;
        if (x.cols() != c * s * s) throw std::invalid_argument("ConvFeatureEmbedder: wrong input width");
        Eigen::MatrixXd out = Eigen::MatrixXd::Zero(x.rows(), feature_dim());
        const double quad = (s / 2) * (s / 2);
        for (Eigen::Index n = 0; n < x.rows(); ++n) {
            for (int f = 0; f < filters_; ++f) {
                for (int i = 0; i < s; ++i)
                    for (int j = 0; j < s; ++j) {
                        double acc = bias_[static_cast<std::size_t>(f)];
                        for (int ch = 0; ch < c; ++ch)
                            for (int di = -1; di <= 1; ++di)
                                for (int dj = -1; dj <= 1; ++dj) {
                                    const int ii = i + di, jj = j + dj;
                                    if (ii < 0 || jj < 0 || ii >= s || jj >= s) continue;
                                    acc += weights_[static_cast<std::size_t>(((f * c + ch) * 3 + di + 1) * 3 + dj + 1)] *
                                           x(n, ch * s * s + ii * s + jj);
                                }
                        const double r = std::max(acc, 0.0);
                        out(n, f * 5) += r / (s * s);
                        const int q = (i >= s / 2 ? 2 : 0) + (j >= s / 2 ? 1 : 0);
                        out(n, f * 5 + 1 + q) += r / quad;
                    }
            }
        }
        return out;
    }

private:
    int channels_, size_, filters_;
    std::vector<double> weights_, bias_;
};

// Fixed random Fourier features sqrt(2/F) cos(x W + b), W ~ N(0, 1/l^2), for
// low-dimensional points. A Gaussian fit in this space separates distributions
// that share their first two moments (e.g. a ring of modes vs. N(0, I)).
class FourierFeatureEmbedder {
public:
    static constexpr std::uint64_t kSeed = 0x5eed'f0f0ull;

    FourierFeatureEmbedder(int input_dim, int features = 64, double length_scale = 0.5)
        : w_(input_dim, features), b_(features) {
        CounterRng rng(kSeed, static_cast<std::uint64_t>(input_dim), Purpose::feature_fn);
        for (Eigen::Index j = 0; j < w_.cols(); ++j)
            for (Eigen::Index i = 0; i < w_.rows(); ++i) w_(i, j) = rng.normal() / length_scale;
        for (Eigen::Index j = 0; j < b_.size(); ++j) b_(j) = 2.0 * std::numbers::pi * rng.uniform();
    }

    int feature_dim() const { return static_cast<int>(w_.cols()); }

    Eigen::MatrixXd operator()(const Eigen::MatrixXd& x) const {
        if (x.cols() != w_.rows()) throw std::invalid_argument("FourierFeatureEmbedder: wrong input width");
        const double scale = std::sqrt(2.0 / static_cast<double>(w_.cols()));
        Eigen::MatrixXd z = (x * w_).rowwise() + b_.transpose();
        return scale * z.array().cos().matrix();
    }

private:
    Eigen::MatrixXd w_;
    Eigen::VectorXd b_;
};

// Feature function matched to a dataset: fixed Fourier features for 2-D points,
// the fixed conv embedder for images.
inline FeatureFn feature_fn_for(const DatasetSpec& spec) {
    if (spec.kind == DatasetKind::tiny_images) {
        auto emb = std::make_shared<ConvFeatureEmbedder>(spec.channels, spec.image_size);
        return [emb](const Eigen::MatrixXd& x) { return (*emb)(x); };
    }
    auto emb = std::make_shared<FourierFeatureEmbedder>(2);
    return [emb](const Eigen::MatrixXd& x) { return (*emb)(x); };
}

template <typename T>
double frechet_feature_distance(const BasicTensor<T>& a, const BasicTensor<T>& b, const FeatureFn& features) {
    return frechet_distance(features(as_matrix(a)), features(as_matrix(b)));
}

inline double median_pairwise_distance(const Eigen::MatrixXd& x) {
    std::vector<double> d;
    d.reserve(static_cast<std::size_t>(x.rows() * (x.rows() - 1) / 2));
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        for (Eigen::Index j = i + 1; j < x.rows(); ++j) d.push_back((x.row(i) - x.row(j)).norm());
    if (d.empty()) return 0.0;
    auto mid = d.begin() + static_cast<long>(d.size() / 2);
    std::nth_element(d.begin(), mid, d.end());
    return *mid;
}

// Unbiased MMD^2 with k(x, y) = exp(-||x - y||^2 / (2 h^2)). h <= 0 selects the
// median pairwise distance of the pooled sample.
inline double mmd_rbf(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double bandwidth = 0.0) {
    if (a.cols() != b.cols()) throw std::invalid_argument("mmd_rbf: feature dimensions differ");
    if (a.rows() < 2 || b.rows() < 2) throw std::invalid_argument("mmd_rbf: need >= 2 samples per side");
    double h = bandwidth;
    if (h <= 0.0) {
        Eigen::MatrixXd pooled(a.rows() + b.rows(), a.cols());
        pooled << a, b;
        h = median_pairwise_distance(pooled);
    }
    if (!(h > 0.0)) throw std::domain_error("mmd_rbf: degenerate bandwidth 0");
    const double inv = 1.0 / (2.0 * h * h);
    auto k = [&](const auto& x, const auto& y) { return std::exp(-(x - y).squaredNorm() * inv); };
    const double m = static_cast<double>(a.rows()), n = static_cast<double>(b.rows());
    double saa = 0.0, sbb = 0.0, sab = 0.0;
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.rows(); ++j)
            if (i != j) saa += k(a.row(i), a.row(j));
    for (Eigen::Index i = 0; i < b.rows(); ++i)
        for (Eigen::Index j = 0; j < b.rows(); ++j)
            if (i != j) sbb += k(b.row(i), b.row(j));
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < b.rows(); ++j) sab += k(a.row(i), b.row(j));
    return saa / (m * (m - 1.0)) + sbb / (n * (n - 1.0)) - 2.0 * sab / (m * n);
}

}  // namespace layersync

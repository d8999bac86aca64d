#pragma once

// Representation regularizers: LayerSync self-alignment, the combined
// training objective, layer-pair selection, the dispersive baseline and the
// temporal relation distillation (TRD) loss.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "layersync/interpolant.hpp"
#include "layersync/ops.hpp"
#include "layersync/rng.hpp"

namespace layersync {

struct LayerPair {
    int k = 0;      // aligned (weak) block
    int k_ref = 0;  // reference (strong) block
    double lambda = 0.0;
};

inline int min_layer_gap(int depth) {
    return std::max(2, static_cast<int>(std::lround(0.28 * depth)));
}

inline int max_reference_layer(int depth) {
    return static_cast<int>(std::floor(0.8 * depth + 1e-9));
}

inline bool is_valid_pair(int depth, int k, int k_ref) {
    return k >= 1 && k < k_ref && k_ref <= max_reference_layer(depth) && k_ref - k >= min_layer_gap(depth);
}

inline void validate(const LayerPair& pair, int depth) {
    if (!(pair.lambda >= 0.0)) throw std::invalid_argument("LayerPair: lambda must be >= 0");
    if (!is_valid_pair(depth, pair.k, pair.k_ref))
        throw std::invalid_argument("LayerPair: (" + std::to_string(pair.k) + ", " + std::to_string(pair.k_ref) +
                                    ") invalid for depth " + std::to_string(depth) + " (need k < k' <= " +
                                    std::to_string(max_reference_layer(depth)) + ", gap >= " +
                                    std::to_string(min_layer_gap(depth)) + ")");
}

inline std::vector<std::pair<int, int>> valid_layer_pairs(int depth) {
    std::vector<std::pair<int, int>> out;
    for (int kr = 1; kr <= depth; ++kr)
        for (int k = 1; k < kr; ++k)
            if (is_valid_pair(depth, k, kr)) out.emplace_back(k, kr);
    return out;
}

// Regularization weight used with the published configurations.
inline double default_lambda(int depth) { return depth >= 24 ? 0.2 : 0.3; }

enum class PairSelection { default_pair, random };

inline std::pair<int, int> select_layers(int depth, PairSelection mode = PairSelection::default_pair,
                                         std::uint64_t seed = 0) {
    if (depth < 4) throw std::invalid_argument("select_layers: depth must be >= 4");
    const auto valid = valid_layer_pairs(depth);
    if (valid.empty())
        throw std::invalid_argument("select_layers: no valid pair for depth " + std::to_string(depth));
    if (mode == PairSelection::random) {
        CounterRng rng(seed, static_cast<std::uint64_t>(depth), Purpose::pairs);
        return valid[rng.uniform_index(valid.size())];
    }
    static const std::map<int, std::pair<int, int>> known{{12, {4, 7}}, {24, {8, 18}}, {28, {8, 16}}};
    if (auto it = known.find(depth); it != known.end()) return it->second;
    const int k0 = static_cast<int>(std::lround(depth * 8.0 / 28.0));
    const int k1 = static_cast<int>(std::lround(depth * 16.0 / 28.0));
    if (is_valid_pair(depth, k0, k1)) return {k0, k1};
    auto best = valid.front();
    int best_dist = INT32_MAX;
    for (const auto& [k, kr] : valid) {
        const int dist = std::abs(k - k0) + std::abs(kr - k1);
        if (dist < best_dist) {
            best_dist = dist;
            best = {k, kr};
        }
    }
    return best;
}

// `count` random valid pairs, distinct while the valid set lasts: a seeded
// shuffle of valid_layer_pairs, reshuffled for each further pass.
inline std::vector<std::pair<int, int>> sample_layer_pairs(int depth, int count, std::uint64_t seed) {
    if (count < 0) throw std::invalid_argument("sample_layer_pairs: count must be >= 0");
    auto valid = valid_layer_pairs(depth);
    if (valid.empty())
        throw std::invalid_argument("sample_layer_pairs: no valid pair for depth " + std::to_string(depth));
    std::vector<std::pair<int, int>> out;
    for (std::uint64_t pass = 0; static_cast<int>(out.size()) < count; ++pass) {
        CounterRng rng(seed, pass, Purpose::pairs);
        for (std::size_t i = valid.size() - 1; i > 0; --i) std::swap(valid[i], valid[rng.uniform_index(i + 1)]);
        for (const auto& p : valid)
            if (static_cast<int>(out.size()) < count) out.push_back(p);
    }
    return out;
}

// Block nearest 25% depth, where the dispersive baseline is applied.
inline int dispersive_layer(int depth) { return std::max(1, static_cast<int>(std::lround(0.25 * depth))); }

// Negative mean patch-wise cosine similarity; z_ref is detached.
template <typename T>
BasicTensor<T> layersync_loss(const BasicTensor<T>& z_k, const BasicTensor<T>& z_ref) {
    if (z_k.shape() != z_ref.shape()) throw shape_error("layersync_loss", z_k.shape(), z_ref.shape());
    if (z_k.dim() != 3) throw ShapeError("layersync_loss: expected (B, P, D), got " + shape_str(z_k.shape()));
    auto a = l2_normalize(z_k);
    auto b = l2_normalize(stop_gradient(z_ref));
    return -mean_all(sum(a * b, -1));
}

template <typename T>
struct ObjectiveTerms {
    BasicTensor<T> total;
    BasicTensor<T> velocity;
    BasicTensor<T> sync;  // undefined when no regularizer is active
};

template <typename T>
ObjectiveTerms<T> combined_loss(const BasicTensor<T>& v_pred, const BasicTensor<T>& x0, const BasicTensor<T>& eps,
                                const std::vector<double>& t, const std::map<int, BasicTensor<T>>& reps,
                                const LayerPair& pair, const Schedule& s = {}) {
    auto fetch = [&](int k) {
        auto it = reps.find(k);
        if (it == reps.end()) throw std::invalid_argument("combined_loss: no tap for block " + std::to_string(k));
        return it->second;
    };
    ObjectiveTerms<T> out;
    out.velocity = velocity_loss(v_pred, x0, eps, t, s);
    out.sync = layersync_loss(fetch(pair.k), fetch(pair.k_ref));
    out.total = out.velocity + out.sync * static_cast<T>(pair.lambda);
    return out;
}

// log of the mean over ordered pairs i != j of exp(-||z_i - z_j||^2 / tau), with
// z_i the patch-mean of sample i. Pairwise: O(B^2 D).
template <typename T>
BasicTensor<T> dispersive_loss(const BasicTensor<T>& z, double tau = 0.5) {
    if (z.dim() != 3) throw ShapeError("dispersive_loss: expected (B, P, D), got " + shape_str(z.shape()));
    if (z.size(0) < 2) throw std::invalid_argument("dispersive_loss: needs batch >= 2");
    if (!(tau > 0.0)) throw std::invalid_argument("dispersive_loss: tau must be > 0");
    auto pooled = mean(z, 1);  // (B, D)
    const std::size_t b = pooled.size(0), d = pooled.size(1);
    const auto zv = pooled.data();
    std::vector<T> logits(b * b, -std::numeric_limits<T>::infinity());
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < b; ++j) {
            if (i == j) continue;
            T dist = T(0);
            for (std::size_t k = 0; k < d; ++k) {
                const T diff = zv[i * d + k] - zv[j * d + k];
                dist += diff * diff;
            }
            logits[i * b + j] = -dist / static_cast<T>(tau);
            mx = std::max(mx, logits[i * b + j]);
        }
    T z_sum = T(0);
    for (std::size_t i = 0; i < b * b; ++i)
        if (i % (b + 1)) z_sum += std::exp(logits[i] - mx);
    const T pairs = static_cast<T>(b * (b - 1));
    const T value = mx + std::log(z_sum) - std::log(pairs);
    auto out = BasicTensor<T>::scalar(value);
    if (auto* tape = detail::recording_tape<T>({&pooled})) {
        tape->record(out.impl(), "dispersive_loss",
                     [pi = pooled.impl(), logits = std::move(logits), mx, z_sum, b, d,
                      tau](const detail::TensorImpl<T>& o) {
                         pi->ensure_grad();
                         const T g = o.grad[0];
                         for (std::size_t i = 0; i < b; ++i)
                             for (std::size_t j = 0; j < b; ++j) {
                                 if (i == j) continue;
                                 const T w = std::exp(logits[i * b + j] - mx) / z_sum;
                                 const T c = g * w * T(-2) / static_cast<T>(tau);
                                 for (std::size_t k = 0; k < d; ++k) {
                                     const T diff = pi->data[i * d + k] - pi->data[j * d + k];
                                     pi->grad[i * d + k] += c * diff;
                                     pi->grad[j * d + k] -= c * diff;
                                 }
                             }
                     });
    }
    return out;
}

template <typename T>
struct SimilarityMaps {
    BasicTensor<T> spatial;   // (f, hw, hw)
    BasicTensor<T> temporal;  // (f, f-1, hw, hw); undefined when f == 1
};

// Per-frame and cross-frame cosine-similarity maps of y (f, hw, D).
// temporal[d, e', i, j] pairs frame d with the e'-th frame other than d (increasing order).
template <typename T>
SimilarityMaps<T> trd_similarity_maps(const BasicTensor<T>& y) {
    if (y.dim() != 3) throw ShapeError("trd: expected (f, hw, D), got " + shape_str(y.shape()));
    const std::size_t f = y.size(0), hw = y.size(1), d = y.size(2);
    auto yn = l2_normalize(y);
    SimilarityMaps<T> maps;
    maps.spatial = matmul(yn, transpose(yn));
    if (f > 1) {
        auto flat = reshape(yn, {f * hw, d});
        auto gram = matmul(flat, transpose(flat));  // (f*hw, f*hw), index (d*hw+i, e*hw+j)
        std::vector<std::size_t> idx;
        idx.reserve(f * (f - 1) * hw * hw);
        for (std::size_t fd = 0; fd < f; ++fd)
            for (std::size_t fe = 0; fe < f; ++fe) {
                if (fe == fd) continue;
                for (std::size_t i = 0; i < hw; ++i)
                    for (std::size_t j = 0; j < hw; ++j) idx.push_back((fd * hw + i) * (f * hw) + fe * hw + j);
            }
        maps.temporal = take(gram, std::move(idx), Shape{f, f - 1, hw, hw});
    }
    return maps;
}

template <typename T>
BasicTensor<T> trd_loss(const BasicTensor<T>& y, const BasicTensor<T>& h_spatial, const BasicTensor<T>& h_temporal) {
    auto maps = trd_similarity_maps(y);
    if (h_spatial.shape() != maps.spatial.shape()) throw shape_error("trd_loss(spatial)", h_spatial.shape(), maps.spatial.shape());
    auto loss = mean_all(abs(h_spatial - maps.spatial));
    if (y.size(0) > 1) {
        if (!h_temporal.defined() || h_temporal.shape() != maps.temporal.shape())
            throw shape_error("trd_loss(temporal)", h_temporal.defined() ? h_temporal.shape() : Shape{},
                              maps.temporal.shape());
        loss = loss + mean_all(abs(h_temporal - maps.temporal));
    }
    return loss;
}

enum class LossKind { layersync, dispersive };

// Order-of-magnitude operation count: c B D for LayerSync (one multiply-add per
// feature of each patch pair plus normalization) and c B^2 D for dispersive
// (difference, square and add per feature of each sample pair).
inline constexpr double kLossFlopsPerElement = 3.0;

inline double loss_flops_estimate(std::size_t batch, std::size_t dim, LossKind kind) {
    const double b = static_cast<double>(batch), d = static_cast<double>(dim);
    return kind == LossKind::layersync ? kLossFlopsPerElement * b * d : kLossFlopsPerElement * b * b * d;
}

}  // namespace layersync

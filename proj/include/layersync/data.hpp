#pragma once

// Deterministic desk-scale datasets, laid out as (N, C, H, W) tensors so every
// dataset feeds the same patch transformer. 2-D point sets use C = 2, H = W = 1.

#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "layersync/rng.hpp"
#include "layersync/tensor.hpp"

namespace layersync {

enum class DatasetKind { gmm2d, checkerboard2d, tiny_images };

inline std::string to_string(DatasetKind k) {
    switch (k) {
        case DatasetKind::gmm2d: return "gmm2d";
        case DatasetKind::checkerboard2d: return "checkerboard2d";
        case DatasetKind::tiny_images: return "tiny_images";
    }
    return "?";
}

inline DatasetKind dataset_kind_from_string(const std::string& s) {
    if (s == "gmm2d") return DatasetKind::gmm2d;
    if (s == "checkerboard2d") return DatasetKind::checkerboard2d;
    if (s == "tiny_images") return DatasetKind::tiny_images;
    throw std::invalid_argument("unknown dataset kind '" + s + "'");
}

struct DatasetSpec {
    DatasetKind kind = DatasetKind::gmm2d;
    int num_classes = 8;
    int size = 8000;
    std::uint64_t seed = 0;
    // gmm2d geometry, before normalization.
    double gmm_radius = 2.0;
    double gmm_std = 0.1;
    // tiny_images
    int image_size = 8;
    int channels = 1;
    double image_noise = 0.1;

    void validate() const {
        if (size <= 0) throw std::invalid_argument("DatasetSpec: size must be positive");
        if (num_classes < 1) throw std::invalid_argument("DatasetSpec: num_classes must be >= 1");
        if (kind == DatasetKind::tiny_images) {
            if (image_size != 8 && image_size != 16) throw std::invalid_argument("DatasetSpec: image_size must be 8 or 16");
            if (channels != 1 && channels != 3) throw std::invalid_argument("DatasetSpec: channels must be 1 or 3");
        }
        if (kind == DatasetKind::checkerboard2d && num_classes != 1 && num_classes != 8)
            throw std::invalid_argument("DatasetSpec: checkerboard2d has 1 or 8 classes (one per occupied cell)");
    }

    int channels_out() const { return kind == DatasetKind::tiny_images ? channels : 2; }
    int height() const { return kind == DatasetKind::tiny_images ? image_size : 1; }
    int width() const { return kind == DatasetKind::tiny_images ? image_size : 1; }
};

template <typename T>
struct Dataset {
    BasicTensor<T> samples;  // (N, C, H, W)
    std::vector<int> labels;
};

// Per-coordinate scale that maps the raw gmm2d mixture to unit variance.
inline double gmm_scale(const DatasetSpec& s) { return std::sqrt(s.gmm_radius * s.gmm_radius / 2.0 + s.gmm_std * s.gmm_std); }

// Normalized mode centers of gmm2d, one per class.
inline std::vector<std::array<double, 2>> gmm_centers(const DatasetSpec& s) {
    std::vector<std::array<double, 2>> c;
    const double scale = gmm_scale(s);
    for (int k = 0; k < s.num_classes; ++k) {
        const double a = 2.0 * std::numbers::pi * k / s.num_classes;
        c.push_back({s.gmm_radius * std::cos(a) / scale, s.gmm_radius * std::sin(a) / scale});
    }
    return c;
}

// Checkerboard on [-2, 2]^2 with 4x4 cells; cell (i, j) is occupied when i + j is even.
inline bool checkerboard_allowed(double x, double y) {
    const int i = static_cast<int>(std::floor(x + 2.0));
    const int j = static_cast<int>(std::floor(y + 2.0));
    return i >= 0 && i < 4 && j >= 0 && j < 4 && (i + j) % 2 == 0;
}
inline double checkerboard_scale() { return std::sqrt(4.0 / 3.0); }

namespace detail {

inline void render_tiny_image(int cls, int num_classes, int size, int channels, CounterRng& rng, double noise,
                              double* out) {
    const double c0 = (size - 1) / 2.0 + (rng.uniform() - 0.5) * 2.0;
    const double c1 = (size - 1) / 2.0 + (rng.uniform() - 0.5) * 2.0;
    const int half = (num_classes + 1) / 2;
    std::vector<double> img(static_cast<std::size_t>(size * size), 0.0);
    if (cls % 2 == 0) {
        // Oriented bar through a jittered center.
        const double angle = std::numbers::pi * (cls / 2) / half;
        const double nx = -std::sin(angle), ny = std::cos(angle);
        for (int i = 0; i < size; ++i)
            for (int j = 0; j < size; ++j) {
                const double dist = std::abs((i - c0) * nx + (j - c1) * ny);
                img[static_cast<std::size_t>(i * size + j)] = std::exp(-dist * dist / (2.0 * 0.8 * 0.8));
            }
    } else {
        // Blob offset from the center in a class-dependent direction.
        const double angle = 2.0 * std::numbers::pi * (cls / 2) / half;
        const double r = size / 4.0;
        const double bi = c0 + r * std::sin(angle), bj = c1 + r * std::cos(angle);
        const double w = size / 8.0 + 0.5;
        for (int i = 0; i < size; ++i)
            for (int j = 0; j < size; ++j) {
                const double d2 = (i - bi) * (i - bi) + (j - bj) * (j - bj);
                img[static_cast<std::size_t>(i * size + j)] = std::exp(-d2 / (2.0 * w * w));
            }
    }
    for (int ch = 0; ch < channels; ++ch) {
        const double gain = channels == 1 ? 1.0 : 0.4 + 0.6 * std::abs(std::cos(1.3 * cls + 2.1 * ch));
        for (int p = 0; p < size * size; ++p)
            out[ch * size * size + p] = gain * img[static_cast<std::size_t>(p)] + noise * rng.normal();
    }
}

}  // namespace detail

template <typename T>
Dataset<T> make_dataset(const DatasetSpec& spec) {
    spec.validate();
    const std::size_t n = static_cast<std::size_t>(spec.size);
    const std::size_t c = static_cast<std::size_t>(spec.channels_out());
    const std::size_t h = static_cast<std::size_t>(spec.height()), w = static_cast<std::size_t>(spec.width());
    std::vector<double> values(n * c * h * w);
    std::vector<int> labels(n);
    CounterRng rng(spec.seed, 0, Purpose::dataset);
    switch (spec.kind) {
        case DatasetKind::gmm2d: {
            const auto centers = gmm_centers(spec);
            const double s = spec.gmm_std / gmm_scale(spec);
            for (std::size_t i = 0; i < n; ++i) {
                const int k = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(spec.num_classes)));
                labels[i] = k;
                values[2 * i] = centers[static_cast<std::size_t>(k)][0] + s * rng.normal();
                values[2 * i + 1] = centers[static_cast<std::size_t>(k)][1] + s * rng.normal();
            }
            break;
        }
        case DatasetKind::checkerboard2d: {
            const double scale = checkerboard_scale();
            for (std::size_t i = 0; i < n; ++i) {
                double x, y;
                do {
                    x = rng.uniform() * 4.0 - 2.0;
                    y = rng.uniform() * 4.0 - 2.0;
                } while (!checkerboard_allowed(x, y));
                const int cell = static_cast<int>(std::floor(x + 2.0)) * 4 + static_cast<int>(std::floor(y + 2.0));
                labels[i] = spec.num_classes == 1 ? 0 : cell / 2;
                values[2 * i] = x / scale;
                values[2 * i + 1] = y / scale;
            }
            break;
        }
        case DatasetKind::tiny_images: {
            const std::size_t per = c * h * w;
            for (std::size_t i = 0; i < n; ++i) {
                const int k = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(spec.num_classes)));
                labels[i] = k;
                detail::render_tiny_image(k, spec.num_classes, spec.image_size, spec.channels, rng, spec.image_noise,
                                          values.data() + i * per);
            }
            double mu = 0.0, var = 0.0;
            for (double v : values) mu += v;
            mu /= static_cast<double>(values.size());
            for (double v : values) var += (v - mu) * (v - mu);
            const double sd = std::sqrt(var / static_cast<double>(values.size()));
            for (double& v : values) v = (v - mu) / sd;
            break;
        }
    }
    std::vector<T> cast(values.begin(), values.end());
    return {BasicTensor<T>({n, c, h, w}, std::move(cast)), std::move(labels)};
}

}  // namespace layersync

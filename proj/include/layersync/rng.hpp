#pragma once

// Counter-based random streams (Philox4x32-10).
//
// A stream is addressed by (seed, step, purpose); draws within a stream
// advance a 32-bit counter word. Two streams never share counters, so data
// order, noise, time and label-dropout draws stay independent and can be
// regenerated for any step without replaying earlier ones.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "layersync/tensor.hpp"

namespace layersync {

enum class Purpose : std::uint32_t {
    init = 1,
    data = 2,
    noise = 3,
    time = 4,
    label_drop = 5,
    sampler_noise = 6,
    sde_noise = 7,
    dataset = 8,
    split = 9,
    probe = 10,
    pairs = 11,
    feature_fn = 12,
    eval = 13,
};

namespace detail {

inline std::array<std::uint32_t, 4> philox_round(std::array<std::uint32_t, 4> ctr, std::array<std::uint32_t, 2> key) {
    constexpr std::uint64_t m0 = 0xD2511F53u, m1 = 0xCD9E8D57u;
    const std::uint64_t p0 = m0 * ctr[0];
    const std::uint64_t p1 = m1 * ctr[2];
    return {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0], static_cast<std::uint32_t>(p1),
            static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1], static_cast<std::uint32_t>(p0)};
}

}  // namespace detail

inline std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr, std::array<std::uint32_t, 2> key) {
    for (int r = 0; r < 10; ++r) {
        if (r) {
            key[0] += 0x9E3779B9u;
            key[1] += 0xBB67AE85u;
        }
        ctr = detail::philox_round(ctr, key);
    }
    return ctr;
}

class CounterRng {
public:
    using result_type = std::uint32_t;

    CounterRng(std::uint64_t seed, std::uint64_t step, Purpose purpose)
        : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
          ctr_{0, static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32),
               static_cast<std::uint32_t>(purpose)} {}

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return 0xFFFFFFFFu; }

    result_type operator()() {
        if (lane_ == 4) {
            block_ = philox4x32(ctr_, key_);
            ++ctr_[0];
            lane_ = 0;
        }
        return block_[lane_++];
    }

    // Uniform on [0, 1) with 53 random bits.
    double uniform() {
        const std::uint64_t hi = (*this)() >> 5;
        const std::uint64_t lo = (*this)() >> 6;
        return static_cast<double>(hi * 67108864ull + lo) * 0x1.0p-53;
    }

    // Uniform on (0, 1].
    double uniform_open0() { return 1.0 - uniform(); }

    std::size_t uniform_index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

    // Box-Muller; the spare variate is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform_open0();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
        has_spare_ = true;
        return r * std::cos(2.0 * std::numbers::pi * u2);
    }

    // Normal truncated to [-2, 2] standard deviations, by rejection.
    double truncated_normal() {
        for (;;) {
            const double z = normal();
            if (std::abs(z) <= 2.0) return z;
        }
    }

private:
    std::array<std::uint32_t, 2> key_;
    std::array<std::uint32_t, 4> ctr_;
    std::array<std::uint32_t, 4> block_{};
    int lane_ = 4;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

template <typename T>
BasicTensor<T> randn(Shape shape, CounterRng& rng) {
    std::vector<T> v(numel_of(shape));
    for (auto& x : v) x = static_cast<T>(rng.normal());
    return BasicTensor<T>(std::move(shape), std::move(v));
}

template <typename T>
BasicTensor<T> rand_uniform(Shape shape, CounterRng& rng) {
    std::vector<T> v(numel_of(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform());
    return BasicTensor<T>(std::move(shape), std::move(v));
}

}  // namespace layersync

#pragma once

// SiT-style patch transformer with adaLN-zero conditioning and per-block
// representation taps.

#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "layersync/ops.hpp"
#include "layersync/rng.hpp"

namespace layersync {

struct BackboneConfig {
    int input_height = 8;
    int input_width = 8;
    int input_channels = 1;
    int patch_size = 2;
    int depth = 4;
    int hidden_dim = 32;
    int num_heads = 4;
    // 0 = unconditional; label `num_classes` is the null token either way.
    int num_classes = 0;
    double class_dropout_prob = 0.1;
    int mlp_ratio = 4;
    int frequency_dim = 256;

    int grid_h() const { return input_height / patch_size; }
    int grid_w() const { return input_width / patch_size; }
    int num_patches() const { return grid_h() * grid_w(); }
    int patch_dim() const { return input_channels * patch_size * patch_size; }
    int null_label() const { return num_classes; }

    void validate() const {
        auto fail = [](const std::string& m) { throw std::invalid_argument("BackboneConfig: " + m); };
        if (input_height <= 0 || input_width <= 0 || input_channels <= 0 || patch_size <= 0)
            fail("dimensions must be positive");
        if (input_height % patch_size || input_width % patch_size)
            fail("input " + std::to_string(input_height) + "x" + std::to_string(input_width) +
                 " not divisible by patch size " + std::to_string(patch_size));
        if (depth < 2) fail("depth must be >= 2");
        if (num_heads <= 0 || hidden_dim % num_heads) fail("hidden_dim must be divisible by num_heads");
        if (hidden_dim % 4) fail("hidden_dim must be divisible by 4 (2-D sincos position embedding)");
        if (frequency_dim % 2) fail("frequency_dim must be even");
        if (num_classes < 0) fail("num_classes must be >= 0");
        if (class_dropout_prob < 0.0 || class_dropout_prob > 1.0) fail("class_dropout_prob outside [0, 1]");
    }
};

template <typename T>
struct LinearParams {
    BasicTensor<T> weight;  // (in, out)
    BasicTensor<T> bias;    // (out)
};

template <typename T>
struct BlockParams {
    LinearParams<T> qkv, proj, fc1, fc2, adaln;
};

template <typename T>
struct BackboneParams {
    LinearParams<T> patch_embed;
    LinearParams<T> time_fc1, time_fc2;
    BasicTensor<T> class_table;  // (num_classes + 1, D); last row is the null token
    std::vector<BlockParams<T>> blocks;
    LinearParams<T> final_adaln, head;

    // Visits every parameter tensor in a fixed order with a stable name.
    template <typename F>
    void for_each(F&& f) {
        auto lin = [&](const std::string& name, LinearParams<T>& l) {
            f(name + ".weight", l.weight);
            f(name + ".bias", l.bias);
        };
        lin("patch_embed", patch_embed);
        lin("time.fc1", time_fc1);
        lin("time.fc2", time_fc2);
        f("class_table", class_table);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string p = "blocks." + std::to_string(i + 1) + ".";
            lin(p + "attn.qkv", blocks[i].qkv);
            lin(p + "attn.proj", blocks[i].proj);
            lin(p + "mlp.fc1", blocks[i].fc1);
            lin(p + "mlp.fc2", blocks[i].fc2);
            lin(p + "adaln", blocks[i].adaln);
        }
        lin("final.adaln", final_adaln);
        lin("final.head", head);
    }
    template <typename F>
    void for_each(F&& f) const {
        const_cast<BackboneParams*>(this)->for_each(
            [&](const std::string& n, BasicTensor<T>& t) { f(n, static_cast<const BasicTensor<T>&>(t)); });
    }

    std::vector<BasicTensor<T>> tensors() const {
        std::vector<BasicTensor<T>> out;
        for_each([&](const std::string&, const BasicTensor<T>& t) { out.push_back(t); });
        return out;
    }
    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for_each([&](const std::string& n, const BasicTensor<T>&) { out.push_back(n); });
        return out;
    }
    std::size_t count() const {
        std::size_t n = 0;
        for_each([&](const std::string&, const BasicTensor<T>& t) { n += t.numel(); });
        return n;
    }
    // Deep copy (fresh storage, no gradients).
    BackboneParams clone() const {
        BackboneParams out = *this;
        out.for_each([](const std::string&, BasicTensor<T>& t) { t = t.clone(); });
        return out;
    }
    void set_requires_grad(bool flag) {
        for_each([&](const std::string&, BasicTensor<T>& t) { t.set_requires_grad(flag); });
    }
    void zero_grad() {
        for_each([](const std::string&, BasicTensor<T>& t) { t.zero_grad(); });
    }
};

// Analytic parameter count for a config, without allocating.
inline std::size_t parameter_count(const BackboneConfig& c) {
    const std::size_t d = static_cast<std::size_t>(c.hidden_dim);
    const std::size_t h = d * static_cast<std::size_t>(c.mlp_ratio);
    auto lin = [](std::size_t in, std::size_t out) { return in * out + out; };
    std::size_t n = lin(static_cast<std::size_t>(c.patch_dim()), d);
    n += lin(static_cast<std::size_t>(c.frequency_dim), d) + lin(d, d);
    n += static_cast<std::size_t>(c.num_classes + 1) * d;
    const std::size_t block = lin(d, 3 * d) + lin(d, d) + lin(d, h) + lin(h, d) + lin(d, 6 * d);
    n += block * static_cast<std::size_t>(c.depth);
    n += lin(d, 2 * d) + lin(d, static_cast<std::size_t>(c.patch_dim()));
    return n;
}

// Truncated-normal(0.02) weights, zero biases; adaLN projections and the output head start at zero.
template <typename T>
BackboneParams<T> init_params(const BackboneConfig& c, std::uint64_t seed) {
    c.validate();
    const std::size_t d = static_cast<std::size_t>(c.hidden_dim);
    const std::size_t h = d * static_cast<std::size_t>(c.mlp_ratio);
    const std::size_t pd = static_cast<std::size_t>(c.patch_dim());
    std::uint64_t stream = 0;
    auto normal = [&](Shape shape) {
        CounterRng rng(seed, stream++, Purpose::init);
        std::vector<T> v(numel_of(shape));
        for (auto& x : v) x = static_cast<T>(0.02 * rng.truncated_normal());
        return BasicTensor<T>(std::move(shape), std::move(v));
    };
    auto lin = [&](std::size_t in, std::size_t out) {
        return LinearParams<T>{normal({in, out}), BasicTensor<T>::zeros({out})};
    };
    auto zero_lin = [&](std::size_t in, std::size_t out) {
        ++stream;
        return LinearParams<T>{BasicTensor<T>::zeros({in, out}), BasicTensor<T>::zeros({out})};
    };
    BackboneParams<T> p;
    p.patch_embed = lin(pd, d);
    p.time_fc1 = lin(static_cast<std::size_t>(c.frequency_dim), d);
    p.time_fc2 = lin(d, d);
    p.class_table = normal({static_cast<std::size_t>(c.num_classes + 1), d});
    for (int i = 0; i < c.depth; ++i) {
        BlockParams<T> b;
        b.qkv = lin(d, 3 * d);
        b.proj = lin(d, d);
        b.fc1 = lin(d, h);
        b.fc2 = lin(h, d);
        b.adaln = zero_lin(d, 6 * d);
        p.blocks.push_back(std::move(b));
    }
    p.final_adaln = zero_lin(d, 2 * d);
    p.head = zero_lin(d, pd);
    p.set_requires_grad(true);
    return p;
}

// (B, C, H, W) -> (B, P, C*p*p). Patches row-major from the top-left; channel-major inside a patch.
template <typename T>
BasicTensor<T> patchify(const BasicTensor<T>& x, std::size_t p) {
    if (x.dim() != 4) throw ShapeError("patchify: expected (B, C, H, W), got " + shape_str(x.shape()));
    const auto& s = x.shape();
    if (p == 0 || s[2] % p || s[3] % p)
        throw ShapeError("patchify: spatial dims of " + shape_str(s) + " not divisible by patch size " +
                         std::to_string(p));
    const std::size_t b = s[0], c = s[1], gh = s[2] / p, gw = s[3] / p;
    auto r = reshape(x, {b, c, gh, p, gw, p});
    auto q = permute(r, {0, 2, 4, 1, 3, 5});
    return reshape(q, {b, gh * gw, c * p * p});
}

template <typename T>
BasicTensor<T> unpatchify(const BasicTensor<T>& tokens, const BackboneConfig& c) {
    const std::size_t p = static_cast<std::size_t>(c.patch_size);
    const std::size_t ch = static_cast<std::size_t>(c.input_channels);
    const std::size_t gh = static_cast<std::size_t>(c.grid_h()), gw = static_cast<std::size_t>(c.grid_w());
    if (tokens.dim() != 3 || tokens.size(1) != gh * gw || tokens.size(2) != ch * p * p)
        throw ShapeError("unpatchify: tokens " + shape_str(tokens.shape()) + " inconsistent with " +
                         std::to_string(gh * gw) + " patches of dim " + std::to_string(ch * p * p));
    const std::size_t b = tokens.size(0);
    auto r = reshape(tokens, {b, gh, gw, ch, p, p});
    auto q = permute(r, {0, 3, 1, 4, 2, 5});
    return reshape(q, {b, ch, gh * p, gw * p});
}

// Fixed 2-D sin/cos position embedding, shape (P, D).
template <typename T>
BasicTensor<T> sincos_position_embedding(std::size_t dim, std::size_t grid_h, std::size_t grid_w) {
    const std::size_t quarter = dim / 4;
    std::vector<T> v(grid_h * grid_w * dim);
    for (std::size_t i = 0; i < grid_h; ++i) {
        for (std::size_t j = 0; j < grid_w; ++j) {
            T* row = v.data() + (i * grid_w + j) * dim;
            for (std::size_t k = 0; k < quarter; ++k) {
                const double omega = 1.0 / std::pow(10000.0, static_cast<double>(k) / static_cast<double>(quarter));
                row[k] = static_cast<T>(std::sin(static_cast<double>(i) * omega));
                row[quarter + k] = static_cast<T>(std::cos(static_cast<double>(i) * omega));
                row[2 * quarter + k] = static_cast<T>(std::sin(static_cast<double>(j) * omega));
                row[3 * quarter + k] = static_cast<T>(std::cos(static_cast<double>(j) * omega));
            }
        }
    }
    return BasicTensor<T>({grid_h * grid_w, dim}, std::move(v));
}

// Sinusoidal frequency features of 1000*t, shape (B, dim).
template <typename T>
BasicTensor<T> timestep_features(const std::vector<double>& t, std::size_t dim, double max_period = 10000.0) {
    const std::size_t half = dim / 2;
    std::vector<T> v(t.size() * dim);
    for (std::size_t b = 0; b < t.size(); ++b) {
        for (std::size_t k = 0; k < half; ++k) {
            const double freq = std::exp(-std::log(max_period) * static_cast<double>(k) / static_cast<double>(half));
            const double arg = 1000.0 * t[b] * freq;
            v[b * dim + k] = static_cast<T>(std::cos(arg));
            v[b * dim + half + k] = static_cast<T>(std::sin(arg));
        }
    }
    return BasicTensor<T>({t.size(), dim}, std::move(v));
}

using TapSet = std::set<int>;

template <typename T>
struct ForwardResult {
    BasicTensor<T> v_pred;
    std::map<int, BasicTensor<T>> reps;  // block index (1-based) -> (B, P, D)
};

template <typename T>
class Backbone {
public:
    explicit Backbone(BackboneConfig config) : config_(std::move(config)) {
        config_.validate();
        pos_embed_ = sincos_position_embedding<T>(static_cast<std::size_t>(config_.hidden_dim),
                                                  static_cast<std::size_t>(config_.grid_h()),
                                                  static_cast<std::size_t>(config_.grid_w()));
    }

    const BackboneConfig& config() const { return config_; }

    // `skip` lists blocks that are bypassed entirely (the residual stream passes through).
    ForwardResult<T> forward(const BackboneParams<T>& params, const BasicTensor<T>& x_t, const std::vector<double>& t,
                             const std::vector<int>& labels, const TapSet& taps = {},
                             const std::set<int>& skip = {}) const {
        const auto& c = config_;
        if (x_t.dim() != 4 || x_t.size(1) != static_cast<std::size_t>(c.input_channels) ||
            x_t.size(2) != static_cast<std::size_t>(c.input_height) ||
            x_t.size(3) != static_cast<std::size_t>(c.input_width))
            throw ShapeError("backbone: input " + shape_str(x_t.shape()) + " does not match config (B, " +
                             std::to_string(c.input_channels) + ", " + std::to_string(c.input_height) + ", " +
                             std::to_string(c.input_width) + ")");
        const std::size_t batch = x_t.size(0);
        if (t.size() != batch) throw ShapeError("backbone: expected one time per sample");
        if (labels.size() != batch) throw ShapeError("backbone: expected one label per sample");
        for (int y : labels)
            if (y < 0 || y > c.num_classes)
                throw std::out_of_range("backbone: label " + std::to_string(y) + " outside [0, " +
                                        std::to_string(c.num_classes) + "]");
        for (int k : taps)
            if (k < 1 || k > c.depth)
                throw std::out_of_range("backbone: tap " + std::to_string(k) + " outside [1, " +
                                        std::to_string(c.depth) + "]");
        for (int k : skip)
            if (k < 1 || k > c.depth)
                throw std::out_of_range("backbone: dropped block " + std::to_string(k) + " outside [1, " +
                                        std::to_string(c.depth) + "]");
        if (static_cast<int>(skip.size()) == c.depth) throw std::invalid_argument("backbone: every block dropped");

        const std::size_t d = static_cast<std::size_t>(c.hidden_dim);
        const std::size_t np = static_cast<std::size_t>(c.num_patches());

        auto x = linear(patchify(x_t, static_cast<std::size_t>(c.patch_size)), params.patch_embed.weight,
                        params.patch_embed.bias) +
                 pos_embed_;

        auto temb = timestep_features<T>(t, static_cast<std::size_t>(c.frequency_dim));
        temb = linear(silu(linear(temb, params.time_fc1.weight, params.time_fc1.bias)), params.time_fc2.weight,
                      params.time_fc2.bias);
        auto cond = silu(temb + embedding(params.class_table, labels));

        ForwardResult<T> result;
        for (int k = 1; k <= c.depth; ++k) {
            if (!skip.count(k)) x = block(params.blocks[static_cast<std::size_t>(k - 1)], x, cond, batch, np, d);
            if (taps.count(k)) result.reps.emplace(k, x);
        }

        auto mod = linear(cond, params.final_adaln.weight, params.final_adaln.bias);
        auto shift = reshape(slice(mod, 1, 0, d), {batch, 1, d});
        auto scale = reshape(slice(mod, 1, d, d), {batch, 1, d});
        auto out = linear(modulate(layer_norm(x), shift, scale), params.head.weight, params.head.bias);
        result.v_pred = unpatchify(out, c);
        return result;
    }

private:
    static BasicTensor<T> modulate(const BasicTensor<T>& x, const BasicTensor<T>& shift, const BasicTensor<T>& scale) {
        return x * (scale + T(1)) + shift;
    }

    BasicTensor<T> block(const BlockParams<T>& bp, const BasicTensor<T>& x, const BasicTensor<T>& cond,
                         std::size_t batch, std::size_t np, std::size_t d) const {
        const std::size_t heads = static_cast<std::size_t>(config_.num_heads);
        const std::size_t hd = d / heads;
        auto mod = linear(cond, bp.adaln.weight, bp.adaln.bias);
        auto chunk = [&](std::size_t i) { return reshape(slice(mod, 1, i * d, d), {batch, 1, d}); };
        auto shift_msa = chunk(0), scale_msa = chunk(1), gate_msa = chunk(2);
        auto shift_mlp = chunk(3), scale_mlp = chunk(4), gate_mlp = chunk(5);

        auto h = modulate(layer_norm(x), shift_msa, scale_msa);
        auto qkv = reshape(linear(h, bp.qkv.weight, bp.qkv.bias), {batch, np, 3, heads, hd});
        qkv = permute(qkv, {2, 0, 3, 1, 4});  // (3, B, H, P, hd)
        auto q = reshape(slice(qkv, 0, 0, 1), {batch, heads, np, hd});
        auto k = reshape(slice(qkv, 0, 1, 1), {batch, heads, np, hd});
        auto v = reshape(slice(qkv, 0, 2, 1), {batch, heads, np, hd});
        auto att = softmax(matmul(q, transpose(k)) * static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))));
        auto o = reshape(permute(matmul(att, v), {0, 2, 1, 3}), {batch, np, d});
        auto x1 = x + gate_msa * linear(o, bp.proj.weight, bp.proj.bias);

        auto h2 = modulate(layer_norm(x1), shift_mlp, scale_mlp);
        auto mlp = linear(gelu(linear(h2, bp.fc1.weight, bp.fc1.bias)), bp.fc2.weight, bp.fc2.bias);
        return x1 + gate_mlp * mlp;
    }

    BackboneConfig config_;
    BasicTensor<T> pos_embed_;
};

}  // namespace layersync

#pragma once

// Run configuration as flat JSON with dotted keys, e.g.
//   {"backbone.depth": 8, "pair.lambda": 0.3, "dataset.kind": "gmm2d"}
// Command-line overrides use the same keys: --set pair.lambda=0.2

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "layersync/backbone.hpp"
#include "layersync/data.hpp"
#include "layersync/optim.hpp"
#include "layersync/regularizers.hpp"
#include "layersync/samplers.hpp"

namespace layersync {

enum class Regularizer { none, layersync, dispersive };

inline std::string to_string(Regularizer r) {
    switch (r) {
        case Regularizer::none: return "none";
        case Regularizer::layersync: return "layersync";
        case Regularizer::dispersive: return "dispersive";
    }
    return "?";
}

inline Regularizer regularizer_from_string(const std::string& s) {
    if (s == "none") return Regularizer::none;
    if (s == "layersync") return Regularizer::layersync;
    if (s == "dispersive") return Regularizer::dispersive;
    throw std::invalid_argument("unknown regularizer '" + s + "'");
}

inline std::string to_string(SamplerKind k) { return k == SamplerKind::ode_heun ? "ode_heun" : "sde_euler_maruyama"; }
inline SamplerKind sampler_kind_from_string(const std::string& s) {
    if (s == "ode_heun") return SamplerKind::ode_heun;
    if (s == "sde_euler_maruyama") return SamplerKind::sde_euler_maruyama;
    throw std::invalid_argument("unknown sampler kind '" + s + "'");
}

struct RunConfig {
    BackboneConfig backbone;
    Regularizer regularizer = Regularizer::layersync;
    // k = k_ref = 0 selects the default pair for the depth; lambda < 0 selects the default weight.
    LayerPair pair{0, 0, -1.0};
    double dispersive_lambda = 0.5;
    double dispersive_tau = 0.5;
    int dispersive_layer = 0;  // 0 = block nearest 25% depth
    DatasetSpec dataset;
    AdamWConfig optimizer;
    int batch_size = 64;
    long total_steps = 5000;
    bool ema_enabled = true;
    double ema_decay = 0.9999;
    SamplerConfig sampler;
    std::uint64_t seed = 0;
    long eval_every = 0;  // 0 = evaluate only at the end
    bool eval_use_ema = false;
    int eval_samples = 1000;
    int eval_reference_size = 2000;
    std::uint64_t eval_seed = 1234;
    long checkpoint_every = 0;  // 0 = only the final checkpoint
    std::string out_dir;
    std::string precision = "f64";

    // Fills derived fields (input geometry, default pair/lambda) and checks invariants.
    void resolve() {
        dataset.validate();
        backbone.input_channels = dataset.channels_out();
        backbone.input_height = dataset.height();
        backbone.input_width = dataset.width();
        if (backbone.input_height % backbone.patch_size || backbone.input_width % backbone.patch_size)
            backbone.patch_size = 1;
        backbone.validate();
        if (pair.k == 0 && pair.k_ref == 0) std::tie(pair.k, pair.k_ref) = select_layers(backbone.depth);
        if (pair.lambda < 0.0) pair.lambda = default_lambda(backbone.depth);
        if (regularizer == Regularizer::layersync) validate(pair, backbone.depth);
        if (dispersive_layer == 0) dispersive_layer = layersync::dispersive_layer(backbone.depth);
        if (regularizer == Regularizer::dispersive) {
            if (batch_size < 2) throw std::invalid_argument("RunConfig: dispersive regularizer needs batch_size >= 2");
            if (dispersive_layer < 1 || dispersive_layer > backbone.depth)
                throw std::invalid_argument("RunConfig: dispersive.layer outside the backbone depth");
        }
        if (batch_size < 1) throw std::invalid_argument("RunConfig: batch_size must be >= 1");
        if (total_steps < 1) throw std::invalid_argument("RunConfig: total_steps must be >= 1");
        if (precision != "f64" && precision != "f32") throw std::invalid_argument("RunConfig: precision must be f64 or f32");
        sampler.validate();
    }
};

namespace detail {

struct ConfigField {
    std::function<void(RunConfig&, const nlohmann::json&)> set;
    std::function<nlohmann::json(const RunConfig&)> get;
};

template <typename Access>
ConfigField plain_field(Access access) {
    return {[access](RunConfig& c, const nlohmann::json& v) {
                using V = std::remove_reference_t<decltype(access(c))>;
                access(c) = v.get<V>();
            },
            [access](const RunConfig& c) { return nlohmann::json(access(const_cast<RunConfig&>(c))); }};
}

template <typename Access, typename From, typename To>
ConfigField enum_field(Access access, From from, To to) {
    return {[access, from](RunConfig& c, const nlohmann::json& v) { access(c) = from(v.get<std::string>()); },
            [access, to](const RunConfig& c) { return nlohmann::json(to(access(const_cast<RunConfig&>(c)))); }};
}

#define LAYERSYNC_FIELD(key, expr) {key, plain_field([](RunConfig& c) -> auto& { return expr; })}

inline const std::map<std::string, ConfigField>& config_fields() {
    static const std::map<std::string, ConfigField> fields = {
        LAYERSYNC_FIELD("backbone.patch_size", c.backbone.patch_size),
        LAYERSYNC_FIELD("backbone.depth", c.backbone.depth),
        LAYERSYNC_FIELD("backbone.hidden_dim", c.backbone.hidden_dim),
        LAYERSYNC_FIELD("backbone.num_heads", c.backbone.num_heads),
        LAYERSYNC_FIELD("backbone.num_classes", c.backbone.num_classes),
        LAYERSYNC_FIELD("backbone.class_dropout_prob", c.backbone.class_dropout_prob),
        LAYERSYNC_FIELD("backbone.mlp_ratio", c.backbone.mlp_ratio),
        LAYERSYNC_FIELD("backbone.frequency_dim", c.backbone.frequency_dim),
        {"regularizer", enum_field([](RunConfig& c) -> auto& { return c.regularizer; }, regularizer_from_string,
                                   [](Regularizer r) { return to_string(r); })},
        LAYERSYNC_FIELD("pair.k", c.pair.k),
        LAYERSYNC_FIELD("pair.k_ref", c.pair.k_ref),
        LAYERSYNC_FIELD("pair.lambda", c.pair.lambda),
        LAYERSYNC_FIELD("dispersive.lambda", c.dispersive_lambda),
        LAYERSYNC_FIELD("dispersive.tau", c.dispersive_tau),
        LAYERSYNC_FIELD("dispersive.layer", c.dispersive_layer),
        {"dataset.kind", enum_field([](RunConfig& c) -> auto& { return c.dataset.kind; }, dataset_kind_from_string,
                                    [](DatasetKind k) { return to_string(k); })},
        LAYERSYNC_FIELD("dataset.num_classes", c.dataset.num_classes),
        LAYERSYNC_FIELD("dataset.size", c.dataset.size),
        LAYERSYNC_FIELD("dataset.seed", c.dataset.seed),
        LAYERSYNC_FIELD("dataset.gmm_radius", c.dataset.gmm_radius),
        LAYERSYNC_FIELD("dataset.gmm_std", c.dataset.gmm_std),
        LAYERSYNC_FIELD("dataset.image_size", c.dataset.image_size),
        LAYERSYNC_FIELD("dataset.channels", c.dataset.channels),
        LAYERSYNC_FIELD("dataset.image_noise", c.dataset.image_noise),
        LAYERSYNC_FIELD("optimizer.lr", c.optimizer.lr),
        LAYERSYNC_FIELD("optimizer.beta1", c.optimizer.beta1),
        LAYERSYNC_FIELD("optimizer.beta2", c.optimizer.beta2),
        LAYERSYNC_FIELD("optimizer.eps", c.optimizer.eps),
        LAYERSYNC_FIELD("optimizer.weight_decay", c.optimizer.weight_decay),
        LAYERSYNC_FIELD("batch_size", c.batch_size),
        LAYERSYNC_FIELD("total_steps", c.total_steps),
        LAYERSYNC_FIELD("ema.enabled", c.ema_enabled),
        LAYERSYNC_FIELD("ema.decay", c.ema_decay),
        {"sampler.kind", enum_field([](RunConfig& c) -> auto& { return c.sampler.kind; }, sampler_kind_from_string,
                                    [](SamplerKind k) { return to_string(k); })},
        LAYERSYNC_FIELD("sampler.steps", c.sampler.steps),
        LAYERSYNC_FIELD("sampler.t_min", c.sampler.t_min),
        LAYERSYNC_FIELD("sampler.t_max", c.sampler.t_max),
        LAYERSYNC_FIELD("sampler.cfg_scale", c.sampler.cfg_scale),
        LAYERSYNC_FIELD("seed", c.seed),
        LAYERSYNC_FIELD("eval_every", c.eval_every),
        LAYERSYNC_FIELD("eval.use_ema", c.eval_use_ema),
        LAYERSYNC_FIELD("eval.samples", c.eval_samples),
        LAYERSYNC_FIELD("eval.reference_size", c.eval_reference_size),
        LAYERSYNC_FIELD("eval.seed", c.eval_seed),
        LAYERSYNC_FIELD("checkpoint_every", c.checkpoint_every),
        LAYERSYNC_FIELD("out_dir", c.out_dir),
        LAYERSYNC_FIELD("precision", c.precision),
    };
    return fields;
}

#undef LAYERSYNC_FIELD

}  // namespace detail

inline void apply_setting(RunConfig& cfg, const std::string& key, const nlohmann::json& value) {
    const auto& fields = detail::config_fields();
    auto it = fields.find(key);
    if (it == fields.end()) throw std::invalid_argument("unknown config key '" + key + "'");
    try {
        it->second.set(cfg, value);
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument("config key '" + key + "': " + e.what());
    }
}

// "key=value"; the value is parsed as JSON when possible, else taken as a string.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw std::invalid_argument("override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    apply_setting(cfg, key, value);
}

inline RunConfig config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw std::invalid_argument("config must be a flat JSON object");
    RunConfig cfg;
    for (const auto& [key, value] : j.items()) apply_setting(cfg, key, value);
    return cfg;
}

inline nlohmann::json config_to_json(const RunConfig& cfg) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [key, field] : detail::config_fields()) j[key] = field.get(cfg);
    return j;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path);
    return config_from_json(nlohmann::json::parse(in));
}

}  // namespace layersync

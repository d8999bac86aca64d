#pragma once

// Training loop: per-step counter-RNG streams, velocity objective plus the
// configured regularizer, AdamW, EMA, periodic evaluation, checkpoint/resume.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "layersync/backbone.hpp"
#include "layersync/config.hpp"
#include "layersync/data.hpp"
#include "layersync/interpolant.hpp"
#include "layersync/io.hpp"
#include "layersync/metrics.hpp"
#include "layersync/metrics_log.hpp"
#include "layersync/optim.hpp"
#include "layersync/regularizers.hpp"
#include "layersync/rng.hpp"
#include "layersync/samplers.hpp"

namespace layersync {

class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(long step, const std::string& what) : std::runtime_error(what), step_(step) {}
    long step() const { return step_; }

private:
    long step_;
};

// Held-out reference set: same generator, different seed.
inline DatasetSpec reference_spec(const RunConfig& cfg) {
    DatasetSpec s = cfg.dataset;
    s.seed = cfg.dataset.seed ^ 0x9e3779b97f4a7c15ull;
    s.size = cfg.eval_reference_size;
    return s;
}

struct EvalResult {
    double fd = 0.0;
    double mmd = 0.0;
};

inline std::string checkpoint_name(long step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "step_%08ld", step);
    return buf;
}

// Most recent complete checkpoint under out_dir/checkpoints, if any.
inline std::optional<fs::path> latest_checkpoint(const fs::path& out_dir) {
    const fs::path root = out_dir / "checkpoints";
    if (!fs::exists(root)) return std::nullopt;
    std::optional<fs::path> best;
    for (const auto& e : fs::directory_iterator(root)) {
        if (!e.is_directory() || !fs::exists(e.path() / "manifest.json")) continue;
        if (e.path().filename().string().rfind("step_", 0) != 0) continue;
        if (!best || e.path().filename() > best->filename()) best = e.path();
    }
    return best;
}

template <typename T>
class Trainer {
public:
    explicit Trainer(RunConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.resolve();
        if (cfg_.backbone.num_classes > 0 && cfg_.backbone.num_classes < cfg_.dataset.num_classes)
            throw std::invalid_argument("RunConfig: backbone.num_classes is smaller than dataset.num_classes");
        model_.emplace(cfg_.backbone);
        data_ = make_dataset<T>(cfg_.dataset);
        params_ = init_params<T>(cfg_.backbone, cfg_.seed);
        params_.set_requires_grad(true);
        flat_ = params_.tensors();
        names_ = params_.names();
        opt_ = AdamWState<T>::zeros_like(flat_);
        if (cfg_.ema_enabled) ema_ = params_.clone();
    }

    const RunConfig& config() const { return cfg_; }
    const Backbone<T>& model() const { return *model_; }
    const BackboneParams<T>& params() const { return params_; }
    const BackboneParams<T>& ema_params() const { return cfg_.ema_enabled ? ema_ : params_; }
    const BackboneParams<T>& eval_params() const { return cfg_.eval_use_ema ? ema_params() : params_; }
    const Dataset<T>& dataset() const { return data_; }
    const MetricsLog& log() const { return log_; }
    long step() const { return step_; }
    std::optional<fs::path> last_checkpoint() const { return last_checkpoint_; }

    // One optimization step; returns the logged row (without eval columns).
    LogRow train_step() {
        const auto start = std::chrono::steady_clock::now();
        const long s = step_ + 1;
        const std::size_t batch = static_cast<std::size_t>(cfg_.batch_size);
        const std::size_t n = data_.labels.size();
        const std::size_t per = data_.samples.numel() / n;
        const auto step_key = static_cast<std::uint64_t>(s);

        std::vector<T> xv(batch * per);
        std::vector<int> labels(batch);
        {
            CounterRng rng(cfg_.seed, step_key, Purpose::data);
            const auto src = data_.samples.data();
            for (std::size_t b = 0; b < batch; ++b) {
                const std::size_t i = rng.uniform_index(n);
                std::copy_n(src.begin() + static_cast<long>(i * per), per, xv.begin() + static_cast<long>(b * per));
                labels[b] = data_.labels[i];
            }
        }
        Shape xs = data_.samples.shape();
        xs[0] = batch;
        BasicTensor<T> x0(xs, std::move(xv));
        CounterRng noise_rng(cfg_.seed, step_key, Purpose::noise);
        auto eps = randn<T>(xs, noise_rng);
        std::vector<double> t(batch);
        {
            CounterRng rng(cfg_.seed, step_key, Purpose::time);
            for (auto& ti : t) ti = rng.uniform();
        }
        const int null_label = cfg_.backbone.null_label();
        if (cfg_.backbone.num_classes == 0) {
            std::fill(labels.begin(), labels.end(), null_label);
        } else {
            CounterRng rng(cfg_.seed, step_key, Purpose::label_drop);
            for (auto& y : labels)
                if (rng.uniform() < cfg_.backbone.class_dropout_prob) y = null_label;
        }

        TapSet taps;
        if (cfg_.regularizer == Regularizer::layersync) taps = {cfg_.pair.k, cfg_.pair.k_ref};
        if (cfg_.regularizer == Regularizer::dispersive) taps = {cfg_.dispersive_layer};

        BasicTape<T> tape;
        LogRow row;
        row.step = s;
        {
            TapeScope<T> scope(tape);
            params_.zero_grad();
            auto xt = corrupt(x0, eps, t);
            auto out = model_->forward(params_, xt, t, labels, taps);
            BasicTensor<T> total, vel, reg;
            switch (cfg_.regularizer) {
                case Regularizer::none:
                    vel = velocity_loss(out.v_pred, x0, eps, t);
                    total = vel;
                    break;
                case Regularizer::layersync: {
                    auto terms = combined_loss(out.v_pred, x0, eps, t, out.reps, cfg_.pair);
                    vel = terms.velocity;
                    reg = terms.sync;
                    total = terms.total;
                    break;
                }
                case Regularizer::dispersive:
                    vel = velocity_loss(out.v_pred, x0, eps, t);
                    reg = dispersive_loss(out.reps.at(cfg_.dispersive_layer), cfg_.dispersive_tau);
                    total = vel + reg * static_cast<T>(cfg_.dispersive_lambda);
                    break;
            }
            row.velocity_loss = static_cast<double>(vel.item());
            row.sync_loss = reg.defined() ? static_cast<double>(reg.item()) : 0.0;
            row.total_loss = static_cast<double>(total.item());
            if (!std::isfinite(row.total_loss)) diverged(s, "loss is " + std::to_string(row.total_loss));
            tape.backward(total);
        }
        try {
            adamw_step(flat_, opt_, cfg_.optimizer, names_);
        } catch (const std::domain_error& e) {
            diverged(s, e.what());
        }
        if (cfg_.ema_enabled) {
            auto ema_flat = ema_.tensors();
            ema_update(ema_flat, flat_, cfg_.ema_decay);
        }
        step_ = s;
        row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
        return row;
    }

    EvalResult evaluate(const BackboneParams<T>& p, const std::set<int>& skip = {}) const {
        const auto& ref = reference();
        const std::size_t n = static_cast<std::size_t>(cfg_.eval_samples);
        std::vector<int> labels(n, cfg_.backbone.null_label());
        if (cfg_.backbone.num_classes > 0)
            for (std::size_t i = 0; i < n; ++i) labels[i] = ref.labels[i % ref.labels.size()];
        auto samples = sample(*model_, p, cfg_.sampler, labels, cfg_.eval_seed, skip);
        const auto features = feature_fn_for(cfg_.dataset);
        const Eigen::MatrixXd fa = features(as_matrix(samples));
        const Eigen::MatrixXd fb = features(as_matrix(ref.samples));
        EvalResult r;
        r.fd = frechet_distance(fa, fb);
        r.mmd = mmd_rbf(fa, fb);
        return r;
    }
    EvalResult evaluate() const { return evaluate(eval_params()); }

    // Trains until `until` (default: total_steps), evaluating and checkpointing as configured.
    void run(std::optional<long> until = std::nullopt) {
        const long stop = std::min(until.value_or(cfg_.total_steps), cfg_.total_steps);
        // the CSV is created on first use so that a resuming Trainer does not clobber it
        if (!cfg_.out_dir.empty() && log_.path().empty()) {
            const fs::path csv = fs::path(cfg_.out_dir) / "metrics.csv";
            log_ = step_ > 0 && fs::exists(csv) ? MetricsLog::reopen(csv, step_) : MetricsLog(csv);
        }
        while (step_ < stop) {
            LogRow row = train_step();
            const bool last = step_ == cfg_.total_steps;
            if (last || (cfg_.eval_every > 0 && step_ % cfg_.eval_every == 0)) {
                const auto e = evaluate();
                row.eval_fd = e.fd;
                row.eval_mmd = e.mmd;
            }
            log_.append(row);
            if (!cfg_.out_dir.empty() && (last || (cfg_.checkpoint_every > 0 && step_ % cfg_.checkpoint_every == 0)))
                save_checkpoint(fs::path(cfg_.out_dir) / "checkpoints" / checkpoint_name(step_));
        }
    }

    void save_checkpoint(const fs::path& dir) {
        TensorArchive a;
        a.meta = {{"step", step_},
                  {"adam_step", opt_.step},
                  {"precision", cfg_.precision},
                  {"config", config_to_json(cfg_)}};
        for (std::size_t i = 0; i < flat_.size(); ++i) {
            a.add("params." + names_[i], flat_[i]);
            a.add("adam.m." + names_[i], opt_.m[i]);
            a.add("adam.v." + names_[i], opt_.v[i]);
        }
        if (cfg_.ema_enabled) {
            const auto ema_flat = ema_.tensors();
            for (std::size_t i = 0; i < ema_flat.size(); ++i) a.add("ema." + names_[i], ema_flat[i]);
        }
        write_archive(dir, a, std::is_same_v<T, float> ? DType::f32 : DType::f64);
        last_checkpoint_ = dir;
    }

    // Restores parameters, optimizer and EMA state and the step counter. When the
    // run has an out_dir, its metrics CSV is truncated to the checkpoint step.
    void load_checkpoint(const fs::path& dir) {
        const auto a = read_archive(dir);
        restore(params_, a, "params.");
        flat_ = params_.tensors();
        for (std::size_t i = 0; i < flat_.size(); ++i) {
            opt_.m[i] = a.get<T>("adam.m." + names_[i]);
            opt_.v[i] = a.get<T>("adam.v." + names_[i]);
        }
        if (cfg_.ema_enabled) {
            if (a.contains("ema." + names_.front()))
                restore(ema_, a, "ema.");
            else
                ema_ = params_.clone();
        }
        step_ = a.meta.at("step").get<long>();
        opt_.step = a.meta.at("adam_step").get<long>();
        last_checkpoint_ = dir;
        if (!cfg_.out_dir.empty()) {
            const fs::path csv = fs::path(cfg_.out_dir) / "metrics.csv";
            log_ = fs::exists(csv) ? MetricsLog::reopen(csv, step_) : MetricsLog(csv);
        } else {
            log_ = MetricsLog();
        }
    }

    void load_params(const fs::path& dir, bool prefer_ema = false) {
        const auto a = read_archive(dir);
        const bool ema = prefer_ema && a.contains("ema." + names_.front());
        restore(params_, a, ema ? "ema." : "params.");
        flat_ = params_.tensors();
        if (cfg_.ema_enabled) ema_ = params_.clone();
        step_ = a.meta.at("step").get<long>();
    }

private:
    const Dataset<T>& reference() const {
        if (!reference_) reference_ = make_dataset<T>(reference_spec(cfg_));
        return *reference_;
    }

    void restore(BackboneParams<T>& p, const TensorArchive& a, const std::string& prefix) {
        const bool grad = &p == &params_;
        p.for_each([&](const std::string& name, BasicTensor<T>& t) {
            auto loaded = a.get<T>(prefix + name);
            if (loaded.shape() != t.shape())
                throw shape_error("load_checkpoint", t.shape(), loaded.shape(), name);
            t = loaded;
            if (grad) t.set_requires_grad(true);
        });
    }

    [[noreturn]] void diverged(long s, const std::string& why) const {
        std::string msg = "training diverged at step " + std::to_string(s) + ": " + why;
        msg += last_checkpoint_ ? "; last good checkpoint " + last_checkpoint_->string() : "; no checkpoint written yet";
        throw TrainingDiverged(s, msg);
    }

    RunConfig cfg_;
    std::optional<Backbone<T>> model_;
    Dataset<T> data_;
    mutable std::optional<Dataset<T>> reference_;
    BackboneParams<T> params_, ema_;
    std::vector<BasicTensor<T>> flat_;
    std::vector<std::string> names_;
    AdamWState<T> opt_;
    MetricsLog log_;
    long step_ = 0;
    std::optional<fs::path> last_checkpoint_;
};

}  // namespace layersync

#pragma once

// Experiment protocols on top of Trainer: lambda sweep, randomized layer
// pairs, block dropping, and the loss wall-time scaling benchmark.

#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "layersync/config.hpp"
#include "layersync/metrics_log.hpp"
#include "layersync/regularizers.hpp"
#include "layersync/train.hpp"

namespace layersync {

inline const std::vector<double>& lambda_grid() {
    static const std::vector<double> grid{0.0, 0.1, 0.2, 0.3, 0.5, 0.7};
    return grid;
}

using ProgressFn = std::function<void(const std::string&)>;

// Trains `cfg`, or reloads its final checkpoint when out_dir already holds a
// finished run with an identical configuration.
template <typename T>
Trainer<T> train_or_reuse(const RunConfig& cfg, const ProgressFn& progress = {}) {
    Trainer<T> trainer(cfg);
    if (!cfg.out_dir.empty()) {
        const fs::path final_dir = fs::path(cfg.out_dir) / "checkpoints" / checkpoint_name(trainer.config().total_steps);
        if (fs::exists(final_dir / "manifest.json")) {
            const auto meta = read_archive(final_dir).meta;
            if (meta.value("config", json()) == config_to_json(trainer.config())) {
                trainer.load_checkpoint(final_dir);
                if (progress) progress("reused " + final_dir.string());
                return trainer;
            }
        }
    }
    trainer.run();
    if (progress) progress("trained " + (cfg.out_dir.empty() ? std::string("(in memory)") : cfg.out_dir));
    return trainer;
}

template <typename T>
double final_fd(const Trainer<T>& t) {
    if (!t.log().empty() && t.log().back().eval_fd) return *t.log().back().eval_fd;
    return t.evaluate().fd;
}

struct MeanStd {
    double mean = 0.0, std = 0.0;
};

inline MeanStd mean_std(const std::vector<double>& v) {
    MeanStd r;
    if (v.empty()) return r;
    r.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    if (v.size() > 1) {
        double ss = 0.0;
        for (double x : v) ss += (x - r.mean) * (x - r.mean);
        r.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    return r;
}

inline std::string run_dir(const std::string& base, const std::string& leaf) {
    return base.empty() ? std::string() : (fs::path(base) / leaf).string();
}

struct SweepRow {
    double lambda = 0.0;
    std::uint64_t seed = 0;
    double final_fd = 0.0;
    double final_mmd = 0.0;
};

// Trains base with regularizer = layersync at each lambda and seed.
template <typename T>
std::vector<SweepRow> sweep_lambda(const RunConfig& base, const std::vector<double>& lambdas,
                                   const std::vector<std::uint64_t>& seeds, const ProgressFn& progress = {}) {
    std::vector<SweepRow> rows;
    for (double lam : lambdas)
        for (auto seed : seeds) {
            RunConfig cfg = base;
            cfg.regularizer = Regularizer::layersync;
            cfg.pair.lambda = lam;
            cfg.seed = seed;
            char leaf[64];
            std::snprintf(leaf, sizeof leaf, "lambda_%.2f_seed_%llu", lam, static_cast<unsigned long long>(seed));
            cfg.out_dir = run_dir(base.out_dir, leaf);
            auto trainer = train_or_reuse<T>(cfg, progress);
            const auto& last = trainer.log().back();
            rows.push_back({lam, seed, last.eval_fd.value_or(NAN), last.eval_mmd.value_or(NAN)});
        }
    return rows;
}

struct PairRunRow {
    int k = 0, k_ref = 0;  // 0, 0 marks the baseline
    double final_fd = 0.0;
};

struct PairSweepResult {
    PairRunRow baseline;
    std::vector<PairRunRow> runs;
    MeanStd stats;
};

// Baseline (no regularizer) plus `count` LayerSync runs on distinct random valid pairs.
template <typename T>
PairSweepResult sweep_pairs(const RunConfig& base, int count, std::uint64_t pair_seed, const ProgressFn& progress = {}) {
    PairSweepResult res;
    RunConfig b = base;
    b.regularizer = Regularizer::none;
    b.out_dir = run_dir(base.out_dir, "baseline");
    res.baseline = {0, 0, final_fd(train_or_reuse<T>(b, progress))};
    std::vector<double> fds;
    const auto pairs = sample_layer_pairs(base.backbone.depth, count, pair_seed);
    for (int i = 0; i < count; ++i) {
        RunConfig cfg = base;
        cfg.regularizer = Regularizer::layersync;
        std::tie(cfg.pair.k, cfg.pair.k_ref) = pairs[static_cast<std::size_t>(i)];
        cfg.out_dir = run_dir(base.out_dir, "pair_" + std::to_string(i) + "_" + std::to_string(cfg.pair.k) + "_" +
                                                std::to_string(cfg.pair.k_ref));
        const double fd = final_fd(train_or_reuse<T>(cfg, progress));
        res.runs.push_back({cfg.pair.k, cfg.pair.k_ref, fd});
        fds.push_back(fd);
    }
    res.stats = mean_std(fds);
    return res;
}

struct DropResult {
    std::set<int> dropped;
    EvalResult baseline;  // all blocks
    EvalResult with_drop;
    double fd_degradation() const { return with_drop.fd - baseline.fd; }
};

// Evaluates the same parameters with and without the listed blocks.
template <typename T>
DropResult layer_drop_eval(const Trainer<T>& trainer, const std::set<int>& drop_set) {
    DropResult r;
    r.dropped = drop_set;
    r.baseline = trainer.evaluate();
    r.with_drop = drop_set.empty() ? r.baseline : trainer.evaluate(trainer.eval_params(), drop_set);
    return r;
}

struct BenchPoint {
    std::size_t batch = 0;
    double layersync_ms = 0.0;
    double dispersive_ms = 0.0;
};

struct BenchResult {
    std::vector<BenchPoint> points;
    double layersync_exponent = 0.0;
    double dispersive_exponent = 0.0;
};

// Least-squares slope of log y against log x.
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
    const std::size_t n = x.size();
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += std::log(x[i]) / n;
        my += std::log(y[i]) / n;
    }
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sxy += (std::log(x[i]) - mx) * (std::log(y[i]) - my);
        sxx += (std::log(x[i]) - mx) * (std::log(x[i]) - mx);
    }
    return sxy / sxx;
}

// Forward + backward wall time of each loss on (B, P, D) inputs; minimum over repeats.
inline BenchResult bench_loss(const std::vector<std::size_t>& batches, std::size_t dim, std::size_t patches,
                              int repeats, std::uint64_t seed = 0) {
    BenchResult res;
    auto time_ms = [&](const std::function<void()>& f) {
        double best = 1e300;
        for (int r = 0; r < repeats; ++r) {
            const auto t0 = std::chrono::steady_clock::now();
            f();
            best = std::min(best, std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
        }
        return best;
    };
    std::vector<double> bs, ls, ds;
    for (std::size_t b : batches) {
        CounterRng rng(seed, b, Purpose::eval);
        auto z = randn<double>({b, patches, dim}, rng);
        auto zr = randn<double>({b, patches, dim}, rng);
        z.set_requires_grad(true);
        BenchPoint p;
        p.batch = b;
        p.layersync_ms = time_ms([&] {
            Tape tape;
            TapeScope<double> scope(tape);
            z.zero_grad();
            tape.backward(layersync_loss(z, zr));
        });
        p.dispersive_ms = time_ms([&] {
            Tape tape;
            TapeScope<double> scope(tape);
            z.zero_grad();
            tape.backward(dispersive_loss(z, 0.5));
        });
        res.points.push_back(p);
        bs.push_back(static_cast<double>(b));
        ls.push_back(p.layersync_ms);
        ds.push_back(p.dispersive_ms);
    }
    res.layersync_exponent = loglog_slope(bs, ls);
    res.dispersive_exponent = loglog_slope(bs, ds);
    return res;
}

}  // namespace layersync
